//! Deployment: select one configuration, plan lowering with deferred
//! vectorization, check GPU compatibility, and produce the specialized
//! image tag.
//!
//! A deployment consumes a container recipe, a resolved specialization, and
//! the target's feature report. Each install-manifest entry becomes a lower
//! step whose architecture slot is filled from the selected vectorization
//! level (falling back to the configuration's original profile); linking is
//! delegated to the project's own build system.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buildscan::{substitute_placeholder, FlagSet, Language};
use crate::driver::ToolchainDriver;
use crate::forge::{ContainerRecipe, ForgeError, InstallManifest, IrStore, ManifestEntryKind};
use crate::matcher::{Assignment, Provenance, ResolvedConfig, VectorLevelTable};
use crate::sysprobe::SystemFeatureReport;
use crate::version::{major, minor, version_at_least};

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("no configuration in the recipe matches the selection")]
    ConfigNotInRecipe,
    #[error("selection matches several configurations: {0:?}")]
    AmbiguousSelection(Vec<String>),
    #[error("gpu deployment incompatible: {0}")]
    IncompatibleGpu(String),
    #[error("no layer available for deferred backend {0}")]
    MissingLayer(String),
    #[error("vectorization level {0} unknown to the codegen table")]
    UnknownVectorLevel(String),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error("driver failure on {target}: {stderr}")]
    Driver { target: String, stderr: String },
    #[error("malformed image tag: {0}")]
    Tag(String),
}

// --- GPU compatibility ------------------------------------------------------------

/// A compute capability as a (major, minor) pair; parses from `sm_80` and
/// `8.0` spellings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Capability(pub u32, pub u32);

impl FromStr for Capability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.trim().strip_prefix("sm_").unwrap_or(s.trim());
        if let Some((maj, min)) = body.split_once('.') {
            let maj = maj.parse().map_err(|_| format!("bad capability {s}"))?;
            let min: String = min.chars().take_while(char::is_ascii_digit).collect();
            let min = min.parse().map_err(|_| format!("bad capability {s}"))?;
            return Ok(Capability(maj, min));
        }
        let digits: String = body.chars().take_while(char::is_ascii_digit).collect();
        if digits.len() < 2 {
            return Err(format!("bad capability {s}"));
        }
        let (maj, min) = digits.split_at(digits.len() - 1);
        Ok(Capability(
            maj.parse().map_err(|_| format!("bad capability {s}"))?,
            min.parse().map_err(|_| format!("bad capability {s}"))?,
        ))
    }
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sm_{}{}", self.0, self.1)
    }
}

impl Serialize for Capability {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Capability {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Host-side GPU parameters: driver version and device capability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostGpu {
    pub driver_version: String,
    pub device_capability: Capability,
}

/// Container-side GPU parameters: runtime version, optional PTX (version
/// and capability), and embedded device binaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerGpu {
    pub runtime_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptx_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptx_capability: Option<Capability>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cubin_capabilities: Vec<Capability>,
}

/// The six parameters governing CUDA compatibility: two on the host, four
/// in the container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuCompatInput {
    pub host: HostGpu,
    pub container: ContainerGpu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompatVerdict {
    /// An embedded device binary matches the device exactly.
    Native { capability: Capability },
    /// No native binary, but the PTX can be JIT-compiled for the device.
    JitFromPtx,
    Incompatible { reason: String },
}

/// Evaluate the compatibility rule table, in order:
/// 1. runtime major != driver major            -> incompatible
/// 2. runtime minor > driver minor (same major) -> incompatible
/// 3. device capability among embedded cubins   -> native
/// 4. PTX capability <= device capability and the driver supports the
///    container's PTX version                   -> JIT from PTX
/// 5. otherwise                                 -> incompatible
pub fn gpu_compat(input: &GpuCompatInput) -> CompatVerdict {
    let driver = &input.host.driver_version;
    let runtime = &input.container.runtime_version;
    if major(runtime) != major(driver) {
        return CompatVerdict::Incompatible { reason: "major mismatch".into() };
    }
    if minor(runtime) > minor(driver) {
        return CompatVerdict::Incompatible { reason: "driver too old for runtime".into() };
    }
    if input
        .container
        .cubin_capabilities
        .contains(&input.host.device_capability)
    {
        return CompatVerdict::Native { capability: input.host.device_capability };
    }
    if let (Some(ptx_version), Some(ptx_capability)) =
        (&input.container.ptx_version, input.container.ptx_capability)
    {
        if ptx_capability <= input.host.device_capability && version_at_least(driver, ptx_version)
        {
            return CompatVerdict::JitFromPtx;
        }
    }
    CompatVerdict::Incompatible { reason: "no matching binary or loadable PTX".into() }
}

// --- Image tags ---------------------------------------------------------------------

fn hex_digit(n: u8) -> char {
    char::from_digit(n as u32, 16).unwrap()
}

fn percent_encode_into(out: &mut String, c: char) {
    let mut buf = [0u8; 4];
    for byte in c.encode_utf8(&mut buf).bytes() {
        out.push('%');
        out.push(hex_digit(byte >> 4));
        out.push(hex_digit(byte & 0x0f));
    }
}

/// Values fold underscores to hyphens; anything outside `[a-z0-9.-]` is
/// percent-encoded.
fn encode_value(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.to_lowercase().chars() {
        match c {
            '_' => out.push('-'),
            'a'..='z' | '0'..='9' | '.' | '-' => out.push(c),
            other => percent_encode_into(&mut out, other),
        }
    }
    out
}

/// Point names additionally percent-encode `-` and `_`, keeping the first
/// hyphen of a segment an unambiguous point/value separator.
fn encode_point(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.to_lowercase().chars() {
        match c {
            'a'..='z' | '0'..='9' | '.' => out.push(c),
            other => percent_encode_into(&mut out, other),
        }
    }
    out
}

fn percent_decode(s: &str) -> Result<String, DeployError> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            if i + 2 >= bytes.len() + 1 {
                return Err(DeployError::Tag(format!("truncated escape in {s}")));
            }
            let hex = std::str::from_utf8(&bytes[i + 1..i + 3])
                .map_err(|_| DeployError::Tag(format!("bad escape in {s}")))?;
            let byte = u8::from_str_radix(hex, 16)
                .map_err(|_| DeployError::Tag(format!("bad escape in {s}")))?;
            out.push(byte);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| DeployError::Tag(format!("bad utf8 in {s}")))
}

/// Encode a resolved configuration as an image tag: lowercase, points in
/// canonical order, `point-value` segments joined by `_`. The empty
/// configuration tags as `generic`.
pub fn image_tag(resolved: &ResolvedConfig) -> String {
    if resolved.assignments.is_empty() {
        return "generic".to_string();
    }
    resolved
        .assignments
        .iter()
        .map(|a| format!("{}-{}", encode_point(&a.point), encode_value(&a.value)))
        .collect::<Vec<_>>()
        .join("_")
}

/// Inverse of [`image_tag`] over tag-canonical configurations. Parsed
/// assignments carry `user` provenance (a tag records no provenance).
pub fn parse_tag(tag: &str) -> Result<ResolvedConfig, DeployError> {
    if tag == "generic" {
        return Ok(ResolvedConfig::default());
    }
    let mut config = ResolvedConfig::default();
    for segment in tag.split('_') {
        let (point, value) = segment
            .split_once('-')
            .ok_or_else(|| DeployError::Tag(format!("segment without separator: {segment}")))?;
        if point.is_empty() || value.is_empty() {
            return Err(DeployError::Tag(format!("empty component in {segment}")));
        }
        config.assignments.push(Assignment {
            point: percent_decode(point)?,
            value: percent_decode(value)?,
            provenance: Provenance::User,
        });
    }
    Ok(config)
}

// --- Deployment planning ---------------------------------------------------------------

/// One artifact lowering: stored IR plus residual flags plus the resolved
/// architecture flags produce one object file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowerStep {
    pub artifact_id: String,
    pub flags: FlagSet,
    /// Architecture flags applied in place of the manifest's `«ARCH»` slot.
    pub arch_flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<String>,
    pub output: String,
    pub language: Language,
}

/// A system-dependent target compiled from source on the final system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdCompile {
    pub source: String,
    pub flags: FlagSet,
    pub arch_flags: Vec<String>,
    pub output: String,
    pub language: Language,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDirective {
    /// Linking is delegated to the project's build system.
    pub delegate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub resolved: ResolvedConfig,
    pub config: String,
    pub build_root: String,
    pub steps: Vec<LowerStep>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sd_compiles: Vec<SdCompile>,
    pub link_phase: LinkDirective,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<CompatVerdict>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bound_layers: BTreeMap<String, String>,
}

impl DeploymentPlan {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serializes");
        text.push('\n');
        text
    }
}

fn fold(s: &str) -> String {
    s.to_lowercase().replace('-', "_")
}

fn select_config<'r>(
    recipe: &'r ContainerRecipe,
    resolved: &ResolvedConfig,
) -> Result<(&'r String, &'r InstallManifest), DeployError> {
    let matches: Vec<(&String, &InstallManifest)> = recipe
        .manifests
        .iter()
        .filter(|(_, manifest)| {
            manifest.assignments.iter().all(|(point, value)| {
                resolved
                    .get(point)
                    .map(|v| fold(v) == fold(value))
                    .unwrap_or(false)
            })
        })
        .collect();
    match matches.len() {
        0 => Err(DeployError::ConfigNotInRecipe),
        1 => Ok(matches[0]),
        _ => Err(DeployError::AmbiguousSelection(
            matches.into_iter().map(|(name, _)| name.clone()).collect(),
        )),
    }
}

/// Architecture flags for one manifest entry: the selected vectorization
/// level's codegen flags when one was chosen, else the entry's original
/// profile.
fn resolve_arch_flags(
    original_profile: &[String],
    simd_choice: Option<&str>,
    table: &VectorLevelTable,
) -> Result<Vec<String>, DeployError> {
    match simd_choice {
        Some(level) => table
            .codegen_flags(level)
            .map(|flags| flags.to_vec())
            .ok_or_else(|| DeployError::UnknownVectorLevel(level.to_string())),
        None => Ok(original_profile.to_vec()),
    }
}

/// Plan a deployment: pick the configuration matching the resolved points,
/// resolve every `«ARCH»` slot, bind deferred GPU layers from the feature
/// report, check GPU compatibility when the metadata allows, and derive the
/// image tag.
pub fn plan_deployment(
    recipe: &ContainerRecipe,
    resolved: &ResolvedConfig,
    features: &SystemFeatureReport,
    table: &VectorLevelTable,
) -> Result<DeploymentPlan, DeployError> {
    let (config_name, manifest) = select_config(recipe, resolved)?;

    let mut verdict = None;
    let mut bound_layers = BTreeMap::new();
    if let Some(backend) = resolved.get("gpu") {
        let Some((_, info)) = features.gpu_backend(backend) else {
            return Err(DeployError::IncompatibleGpu(format!(
                "backend {backend} absent from the feature report"
            )));
        };
        let layer_key = backend.to_lowercase();
        if recipe.deferred_layers.contains(&layer_key) || recipe.gpu_layers.contains_key(&layer_key)
        {
            let template = recipe
                .gpu_layers
                .get(&layer_key)
                .ok_or_else(|| DeployError::MissingLayer(layer_key.clone()))?;
            let version = info.version.clone().unwrap_or_else(|| "latest".into());
            bound_layers.insert(layer_key.clone(), template.replace("{version}", &version));
        }
        if let (Some(container), Some(driver_version), Some(capability)) = (
            recipe.gpu.as_ref(),
            info.version.as_ref(),
            info.device_capability.as_ref(),
        ) {
            let input = GpuCompatInput {
                host: HostGpu {
                    driver_version: driver_version.clone(),
                    device_capability: capability
                        .parse()
                        .map_err(DeployError::IncompatibleGpu)?,
                },
                container: ContainerGpu {
                    runtime_version: container.runtime_version.clone(),
                    ptx_version: container.ptx_version.clone(),
                    ptx_capability: container
                        .ptx_capability
                        .as_ref()
                        .map(|c| c.parse().map_err(DeployError::IncompatibleGpu))
                        .transpose()?,
                    cubin_capabilities: container
                        .cubin_capabilities
                        .iter()
                        .map(|c| c.parse().map_err(DeployError::IncompatibleGpu))
                        .collect::<Result<_, _>>()?,
                },
            };
            let result = gpu_compat(&input);
            if let CompatVerdict::Incompatible { reason } = &result {
                return Err(DeployError::IncompatibleGpu(reason.clone()));
            }
            verdict = Some(result);
        }
    }

    let simd_choice = resolved.get("simd");
    let mut steps = Vec::new();
    let mut sd_compiles = Vec::new();
    for entry in &manifest.entries {
        let arch_flags = resolve_arch_flags(&entry.arch_profile, simd_choice, table)?;
        match entry.kind {
            ManifestEntryKind::Ir => steps.push(LowerStep {
                artifact_id: entry.artifact_id.clone().unwrap_or_default(),
                flags: entry.flags.clone(),
                arch_flags,
                opt_level: entry.opt_level.clone(),
                output: entry.output.clone(),
                language: entry.language,
            }),
            ManifestEntryKind::Source => sd_compiles.push(SdCompile {
                source: entry.source.clone(),
                flags: entry.flags.clone(),
                arch_flags,
                output: entry.output.clone(),
                language: entry.language,
            }),
        }
    }

    Ok(DeploymentPlan {
        resolved: resolved.clone(),
        config: config_name.clone(),
        build_root: recipe.build_root.clone(),
        steps,
        sd_compiles,
        link_phase: LinkDirective { delegate: "build-system".into() },
        tag: image_tag(resolved),
        verdict,
        bound_layers,
    })
}

/// Execute a deployment plan: lower every stored artifact and compile the
/// SD targets, writing objects at their manifest locations under `root`.
/// Returns the written object paths.
pub fn execute_plan(
    plan: &DeploymentPlan,
    store: &IrStore,
    driver: &ToolchainDriver,
    root: &str,
) -> Result<Vec<String>, DeployError> {
    let mut written = Vec::new();
    for step in &plan.steps {
        let bytes = store.get(&step.artifact_id)?;
        let mut flags: Vec<String> = step
            .flags
            .iter()
            .map(|f| substitute_placeholder(f, root))
            .collect();
        flags.extend(step.arch_flags.iter().cloned());
        let output = substitute_placeholder(&step.output, root);
        if let Some(parent) = Path::new(&output).parent() {
            std::fs::create_dir_all(parent).map_err(|e| DeployError::Driver {
                target: output.clone(),
                stderr: e.to_string(),
            })?;
        }
        driver
            .lower(&bytes, &flags, step.language, Path::new(&output))
            .map_err(|e| DeployError::Driver { target: output.clone(), stderr: e.to_string() })?;
        written.push(output);
    }
    for sd in &plan.sd_compiles {
        let source = substitute_placeholder(&sd.source, root);
        let mut flags: Vec<String> = sd
            .flags
            .iter()
            .map(|f| substitute_placeholder(f, root))
            .collect();
        flags.extend(sd.arch_flags.iter().cloned());
        let output = substitute_placeholder(&sd.output, root);
        if let Some(parent) = Path::new(&output).parent() {
            std::fs::create_dir_all(parent).map_err(|e| DeployError::Driver {
                target: output.clone(),
                stderr: e.to_string(),
            })?;
        }
        driver
            .compile_object(Path::new(&source), &flags, sd.language, Path::new(&output))
            .map_err(|e| DeployError::Driver { target: output.clone(), stderr: e.to_string() })?;
        written.push(output);
    }
    Ok(written)
}
