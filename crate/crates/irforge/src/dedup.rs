//! Distinct-IR computation across build configurations.
//!
//! Configurations of the same application compile largely identical
//! translation units; the differences hide behind compile flags that often
//! do not affect the result. This module compares targets behaviorally:
//! preprocess under each configuration's macro flags and hash the text,
//! strip architecture flags (vectorization is reapplied at deployment),
//! and treat the OpenMP enable flag as irrelevant for units that contain no
//! OpenMP constructs. Targets that end up with the same key share one IR
//! artifact; the plan records the shared core, per-configuration deltas, and
//! system-dependent targets excluded from IR form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::buildscan::{substitute_placeholder, BuildConfiguration, FlagSet, Language, ScanOutput};
use crate::driver::{DriverError, ToolchainDriver};
use crate::tables::{is_openmp_flag, ArchFlagTable};

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("driver failure on {target}: {stderr}")]
    Driver { target: String, stderr: String },
    #[error("unknown target id in SD list: ({0}, {1})")]
    UnknownTargetId(String, String),
    #[error("no configurations to deduplicate")]
    EmptyInput,
    #[error("openmp normalization precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("coverage invariant violated: {0}")]
    Coverage(String),
}

impl From<DriverError> for DedupError {
    fn from(err: DriverError) -> Self {
        match err {
            DriverError::Failure { target, stderr } => DedupError::Driver { target, stderr },
            other => DedupError::Driver { target: String::new(), stderr: other.to_string() },
        }
    }
}

// --- Architecture flag stripping ---------------------------------------------

/// Architecture-specific codegen tokens stripped from a flag set, with their
/// original positions so the exact flag vector can be reconstructed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ArchProfile {
    pub tokens: Vec<String>,
    pub positions: Vec<usize>,
}

impl ArchProfile {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Interleave profile tokens back into a residual to reproduce the
    /// original flag vector, order-stably.
    pub fn reconstruct(&self, residual: &FlagSet) -> FlagSet {
        let total = residual.len() + self.tokens.len();
        let mut out: Vec<Option<String>> = vec![None; total];
        for (token, &pos) in self.tokens.iter().zip(&self.positions) {
            if pos < total {
                out[pos] = Some(token.clone());
            }
        }
        let mut rest = residual.iter();
        for slot in out.iter_mut() {
            if slot.is_none() {
                *slot = rest.next().cloned();
            }
        }
        FlagSet(out.into_iter().flatten().collect())
    }
}

/// Split a canonical flag set into (residual, architecture profile). Macro
/// definitions are never stripped: they alter preprocessed text and so
/// belong to the behavioral comparison, not the deferred codegen profile.
pub fn strip_arch_flags(flags: &FlagSet) -> (FlagSet, ArchProfile) {
    let table = ArchFlagTable::builtin();
    let mut residual = Vec::new();
    let mut profile = ArchProfile::default();
    let mut i = 0;
    let tokens = &flags.0;
    while i < tokens.len() {
        let token = &tokens[i];
        if table.is_paired(token) {
            profile.tokens.push(token.clone());
            profile.positions.push(i);
            if i + 1 < tokens.len() {
                profile.tokens.push(tokens[i + 1].clone());
                profile.positions.push(i + 1);
                i += 2;
            } else {
                i += 1;
            }
            continue;
        }
        if table.is_arch_flag(token) {
            profile.tokens.push(token.clone());
            profile.positions.push(i);
        } else {
            residual.push(token.clone());
        }
        i += 1;
    }
    (FlagSet(residual), profile)
}

// --- OpenMP relevance ----------------------------------------------------------

/// True iff the preprocessed text contains an OpenMP pragma construct or an
/// invocation of an OpenMP runtime API identifier (prefix `omp_`). String
/// and character literals are skipped; comments are already gone after
/// preprocessing.
pub fn classify_openmp(text: &str) -> bool {
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim_start();
            if let Some(after) = rest.strip_prefix("pragma") {
                let after = after.trim_start();
                if after == "omp" || after.starts_with("omp ") || after.starts_with("omp\t") {
                    return true;
                }
            }
            continue;
        }
        if scan_for_omp_identifier(line) {
            return true;
        }
    }
    false
}

fn scan_for_omp_identifier(line: &str) -> bool {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() {
                if chars[i] == '\\' {
                    i += 2;
                    continue;
                }
                if chars[i] == c {
                    i += 1;
                    break;
                }
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let ident: String = chars[start..i].iter().collect();
            if ident.starts_with("omp_") {
                return true;
            }
            continue;
        }
        i += 1;
    }
    false
}

/// Merge decision for a pair of targets with equal preprocessed digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeDecision {
    Merge,
    Distinct,
}

/// Decide whether two equal-digest targets whose flags differ only by the
/// OpenMP enable flag share an IR. They do exactly when the text has no
/// OpenMP constructs.
pub fn normalize_openmp(
    flags_a: &FlagSet,
    flags_b: &FlagSet,
    preprocessed_text: &str,
) -> Result<MergeDecision, DedupError> {
    let base_a: Vec<&String> = flags_a.iter().filter(|f| !is_openmp_flag(f)).collect();
    let base_b: Vec<&String> = flags_b.iter().filter(|f| !is_openmp_flag(f)).collect();
    if base_a != base_b {
        return Err(DedupError::PreconditionViolated(
            "flag difference exceeds the OpenMP flag".into(),
        ));
    }
    let omp_a = flags_a.iter().any(|f| is_openmp_flag(f));
    let omp_b = flags_b.iter().any(|f| is_openmp_flag(f));
    if omp_a == omp_b {
        return Err(DedupError::PreconditionViolated(
            "flags do not differ by the OpenMP flag".into(),
        ));
    }
    if classify_openmp(preprocessed_text) {
        Ok(MergeDecision::Distinct)
    } else {
        Ok(MergeDecision::Merge)
    }
}

// --- Line marker normalization --------------------------------------------------

/// Rewrite build-root paths inside preprocessor line markers (`# N "path"`
/// and `#line N "path"`) to the placeholder, so digests do not depend on
/// where the build tree was mounted.
pub fn normalize_line_markers(text: &str, build_root: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let trimmed = line.trim_start();
        let is_marker = trimmed
            .strip_prefix('#')
            .map(|rest| {
                let rest = rest.trim_start();
                let rest = rest.strip_prefix("line").unwrap_or(rest);
                let rest = rest.trim_start();
                rest.starts_with(|c: char| c.is_ascii_digit())
            })
            .unwrap_or(false);
        if is_marker {
            out.push_str(&crate::buildscan::apply_placeholder(line, build_root));
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

fn digest_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

// --- Keys, plans, reports ---------------------------------------------------------

/// CUDA virtual-architecture selection flags folded into the key for
/// device-code-bearing units.
const CUDA_ARCH_PREFIXES: &[&str] = &["--cuda-gpu-arch=", "--offload-arch=", "-arch="];

fn cuda_arch_list(flags: &FlagSet) -> Vec<String> {
    let mut arches = Vec::new();
    let mut iter = flags.iter().peekable();
    while let Some(token) = iter.next() {
        if CUDA_ARCH_PREFIXES.iter().any(|p| token.starts_with(p)) {
            arches.push(token.clone());
        } else if token == "-gencode" {
            if let Some(value) = iter.peek() {
                arches.push(format!("-gencode {value}"));
            }
        }
    }
    arches.sort();
    arches
}

/// The identity of one distinct IR: same key, same artifact.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TUKey {
    /// Hex digest of the normalized preprocessed unit.
    pub preprocessed_digest: String,
    /// Canonical flags after arch stripping and OpenMP normalization.
    pub residual_flags: FlagSet,
    pub language: Language,
    /// Virtual GPU architectures for device-bearing units.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cuda_arches: Vec<String>,
    /// GPU backend assignment of the owning configuration, for CUDA units;
    /// prevents merging across backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_backend: Option<String>,
}

impl TUKey {
    /// Stable plan-level artifact id derived from the key itself.
    pub fn artifact_id(&self) -> String {
        let encoded = serde_json::to_vec(self).expect("key serializes");
        format!("tu-{}", &digest_hex(&encoded)[..24])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMember {
    pub config: String,
    pub source: String,
    pub output: String,
}

/// One distinct IR with every (config, target) it serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub artifact_id: String,
    pub key: TUKey,
    pub members: Vec<PlanMember>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementKind {
    Core,
    Delta,
    Sd,
}

/// Where one (config, target) lands in the plan, with everything manifest
/// rendering needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPlacement {
    pub source: String,
    pub output: String,
    pub language: Language,
    pub kind: PlacementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_id: Option<String>,
    pub residual_flags: FlagSet,
    pub arch_profile: ArchProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdTarget {
    pub source: String,
    pub output: String,
    pub language: Language,
    pub flags: FlagSet,
}

/// The shared-IR core, per-configuration deltas, and SD lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupPlan {
    pub build_root: String,
    /// Keys shared by every configuration.
    pub core: Vec<PlanGroup>,
    /// Keys used by a strict subset of configurations, listed per config.
    pub deltas: BTreeMap<String, Vec<PlanGroup>>,
    pub sd_targets: BTreeMap<String, Vec<SdTarget>>,
    /// Per-config placement of every target, in scan order.
    pub placements: BTreeMap<String, Vec<TargetPlacement>>,
    pub config_assignments: BTreeMap<String, BTreeMap<String, String>>,
}

impl DedupPlan {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Every distinct group (core plus deduplicated delta keys).
    pub fn all_groups(&self) -> Vec<&PlanGroup> {
        let mut seen = BTreeSet::new();
        let mut groups = Vec::new();
        for group in &self.core {
            if seen.insert(&group.artifact_id) {
                groups.push(group);
            }
        }
        for delta in self.deltas.values() {
            for group in delta {
                if seen.insert(&group.artifact_id) {
                    groups.push(group);
                }
            }
        }
        groups
    }

    pub fn config_names(&self) -> Vec<&String> {
        self.placements.keys().collect()
    }
}

fn ser_reduction<S: serde::Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{value:.4}"))
}

fn de_reduction<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    use serde::de::Error;
    let raw = serde_json::Value::deserialize(d)?;
    match raw {
        serde_json::Value::String(s) => s.parse().map_err(D::Error::custom),
        serde_json::Value::Number(n) => Ok(n.as_f64().unwrap_or(0.0)),
        other => Err(D::Error::custom(format!("bad reduction value {other}"))),
    }
}

/// Counting evidence: total targets versus distinct IR files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub n_configs: usize,
    /// IR-eligible target count per configuration.
    pub t_per_config: BTreeMap<String, usize>,
    pub sum_t: usize,
    pub t_prime: usize,
    /// `1 - t_prime / sum_t`, serialized with four decimal places.
    #[serde(serialize_with = "ser_reduction", deserialize_with = "de_reduction")]
    pub reduction: f64,
    pub si_count: usize,
    pub sd_count: usize,
}

impl DedupReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

// --- Partition -----------------------------------------------------------------

/// SI/SD partition of every (config, target).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// (config, target-index) pairs eligible for shared IR.
    pub si: Vec<(usize, usize)>,
    /// (config, target-index) pairs requiring the final system.
    pub sd: Vec<(usize, usize)>,
}

/// Partition targets into system-independent and system-dependent sets:
/// user-declared SD targets, `other`-language targets, and targets whose
/// language the driver cannot take to IR are SD; everything else (MPI
/// included — it compiles against the portable-ABI MPI) is SI.
pub fn partition_targets(
    configs: &[BuildConfiguration],
    user_sd: &[(String, String)],
    driver: &ToolchainDriver,
) -> Result<Partition, DedupError> {
    for (src, out) in user_sd {
        let known = configs
            .iter()
            .any(|c| c.targets.iter().any(|t| &t.source == src && &t.output == out));
        if !known {
            return Err(DedupError::UnknownTargetId(src.clone(), out.clone()));
        }
    }

    let mut partition = Partition { si: Vec::new(), sd: Vec::new() };
    for (ci, config) in configs.iter().enumerate() {
        for (ti, target) in config.targets.iter().enumerate() {
            let user_marked = user_sd
                .iter()
                .any(|(s, o)| s == &target.source && o == &target.output);
            let sd = user_marked
                || target.language == Language::Other
                || !driver.can_emit_ir(target.language);
            if sd {
                partition.sd.push((ci, ti));
            } else {
                partition.si.push((ci, ti));
            }
        }
    }
    Ok(partition)
}

// --- The pipeline -----------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct DedupOptions {
    /// Parallelism width for preprocessing; 0 means the rayon default.
    pub jobs: usize,
    /// User-declared system-dependent target ids (source, output).
    pub user_sd: Vec<(String, String)>,
}

struct PreprocessedTarget {
    config_index: usize,
    target_index: usize,
    digest: String,
    has_omp_construct: bool,
}

/// Extract the intended optimization level from a residual flag set.
pub fn opt_level(flags: &FlagSet) -> Option<String> {
    flags
        .iter()
        .filter(|f| f.starts_with("-O"))
        .next_back()
        .cloned()
}

/// Run the dedup pipeline over a scan snapshot: preprocess and digest every
/// SI target under its configuration's flags, strip architecture flags,
/// normalize the OpenMP flag, group by key, and split the groups into the
/// shared core and per-configuration deltas. Fails fast on the first driver
/// error; partial plans are never produced.
pub fn dedup(
    scan: &ScanOutput,
    driver: &ToolchainDriver,
    options: &DedupOptions,
) -> Result<(DedupPlan, DedupReport), DedupError> {
    if scan.configurations.is_empty() {
        return Err(DedupError::EmptyInput);
    }
    let configs = &scan.configurations;
    let root = scan.build_root.as_str();
    let partition = partition_targets(configs, &options.user_sd, driver)?;

    // preprocess + digest, optionally in parallel
    let jobs: Vec<(usize, usize)> = partition.si.clone();
    let run_job = |&(ci, ti): &(usize, usize)| -> Result<PreprocessedTarget, DedupError> {
        let target = &configs[ci].targets[ti];
        let source = substitute_placeholder(&target.source, root);
        let flags: Vec<String> = target
            .flags
            .iter()
            .map(|f| substitute_placeholder(f, root))
            .collect();
        let text = driver
            .preprocess(Path::new(&source), &flags, target.language)
            .map_err(|e| match e {
                DriverError::Failure { stderr, .. } => DedupError::Driver {
                    target: format!("{}:{}", configs[ci].name, target.source),
                    stderr,
                },
                other => DedupError::Driver {
                    target: format!("{}:{}", configs[ci].name, target.source),
                    stderr: other.to_string(),
                },
            })?;
        let normalized = normalize_line_markers(&text, root);
        Ok(PreprocessedTarget {
            config_index: ci,
            target_index: ti,
            digest: digest_hex(normalized.as_bytes()),
            has_omp_construct: classify_openmp(&normalized),
        })
    };

    let results: Vec<Result<PreprocessedTarget, DedupError>> = if options.jobs == 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| DedupError::Driver { target: String::new(), stderr: e.to_string() })?;
        pool.install(|| jobs.par_iter().map(run_job).collect())
    };

    // fail-fast, deterministically in (config, target) order
    let mut preprocessed = Vec::with_capacity(results.len());
    for result in results {
        preprocessed.push(result?);
    }

    // construct-bearing digests: any unit whose text mentions OpenMP
    let mut construct_digests: BTreeSet<&str> = BTreeSet::new();
    for p in &preprocessed {
        if p.has_omp_construct {
            construct_digests.insert(&p.digest);
        }
    }

    // key every SI target
    let mut groups: BTreeMap<TUKey, Vec<PlanMember>> = BTreeMap::new();
    let mut placements: BTreeMap<String, Vec<TargetPlacement>> = BTreeMap::new();
    for config in configs.iter() {
        placements.insert(config.name.clone(), Vec::new());
    }
    let mut placement_slots: BTreeMap<(usize, usize), (TUKey, TargetPlacement)> = BTreeMap::new();

    for p in &preprocessed {
        let config = &configs[p.config_index];
        let target = &config.targets[p.target_index];
        let (residual0, profile) = strip_arch_flags(&target.flags);

        let has_omp_flag = residual0.iter().any(|f| is_openmp_flag(f));
        let omp_effective = has_omp_flag && construct_digests.contains(p.digest.as_str());
        let residual = if has_omp_flag && !omp_effective {
            FlagSet(residual0.iter().filter(|f| !is_openmp_flag(f)).cloned().collect())
        } else {
            residual0
        };

        let (cuda_arches, gpu_backend) = if target.language == Language::Cuda {
            (
                cuda_arch_list(&target.flags),
                config.assignments.get("gpu").cloned(),
            )
        } else {
            (Vec::new(), None)
        };

        let key = TUKey {
            preprocessed_digest: p.digest.clone(),
            residual_flags: residual.clone(),
            language: target.language,
            cuda_arches,
            gpu_backend,
        };
        let placement = TargetPlacement {
            source: target.source.clone(),
            output: target.output.clone(),
            language: target.language,
            kind: PlacementKind::Delta, // refined below
            artifact_id: Some(key.artifact_id()),
            residual_flags: residual,
            arch_profile: profile,
            opt_level: opt_level(&target.flags),
        };
        groups.entry(key.clone()).or_default().push(PlanMember {
            config: config.name.clone(),
            source: target.source.clone(),
            output: target.output.clone(),
        });
        placement_slots.insert((p.config_index, p.target_index), (key, placement));
    }

    let all_config_names: BTreeSet<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    let mut core: Vec<PlanGroup> = Vec::new();
    let mut deltas: BTreeMap<String, Vec<PlanGroup>> = BTreeMap::new();
    let mut core_keys: BTreeSet<String> = BTreeSet::new();

    for (key, mut members) in groups {
        members.sort_by(|a, b| {
            (&a.config, &a.source, &a.output).cmp(&(&b.config, &b.source, &b.output))
        });
        let span: BTreeSet<&str> = members.iter().map(|m| m.config.as_str()).collect();
        let artifact_id = key.artifact_id();
        if span == all_config_names {
            core_keys.insert(artifact_id.clone());
            core.push(PlanGroup { artifact_id, key, members });
        } else {
            for config_name in span {
                let local_members: Vec<PlanMember> = members
                    .iter()
                    .filter(|m| m.config == config_name)
                    .cloned()
                    .collect();
                deltas.entry(config_name.to_string()).or_default().push(PlanGroup {
                    artifact_id: artifact_id.clone(),
                    key: key.clone(),
                    members: local_members,
                });
            }
        }
    }
    core.sort_by(|a, b| a.artifact_id.cmp(&b.artifact_id));
    for delta in deltas.values_mut() {
        delta.sort_by(|a, b| a.artifact_id.cmp(&b.artifact_id));
    }

    // finalize placements in scan order
    let mut sd_targets: BTreeMap<String, Vec<SdTarget>> = BTreeMap::new();
    for &(ci, ti) in &partition.sd {
        let config = &configs[ci];
        let target = &config.targets[ti];
        sd_targets.entry(config.name.clone()).or_default().push(SdTarget {
            source: target.source.clone(),
            output: target.output.clone(),
            language: target.language,
            flags: target.flags.clone(),
        });
        placements.get_mut(&config.name).unwrap().push(TargetPlacement {
            source: target.source.clone(),
            output: target.output.clone(),
            language: target.language,
            kind: PlacementKind::Sd,
            artifact_id: None,
            residual_flags: target.flags.clone(),
            arch_profile: ArchProfile::default(),
            opt_level: opt_level(&target.flags),
        });
    }
    for ((ci, _ti), (key, mut placement)) in placement_slots {
        let config = &configs[ci];
        placement.kind = if core_keys.contains(&key.artifact_id()) {
            PlacementKind::Core
        } else {
            PlacementKind::Delta
        };
        placements.get_mut(&config.name).unwrap().push(placement);
    }

    let plan = DedupPlan {
        build_root: scan.build_root.clone(),
        core,
        deltas,
        sd_targets,
        placements,
        config_assignments: configs
            .iter()
            .map(|c| (c.name.clone(), c.assignments.clone()))
            .collect(),
    };

    // coverage: every (config, target) appears exactly once
    let mut covered: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for (config, list) in &plan.placements {
        for placement in list {
            *covered
                .entry((config.clone(), placement.source.clone(), placement.output.clone()))
                .or_default() += 1;
        }
    }
    for config in configs.iter() {
        for target in &config.targets {
            let count = covered
                .get(&(config.name.clone(), target.source.clone(), target.output.clone()))
                .copied()
                .unwrap_or(0);
            if count != 1 {
                return Err(DedupError::Coverage(format!(
                    "target ({}, {}) of {} covered {count} times",
                    target.source, target.output, config.name
                )));
            }
        }
    }

    let mut t_per_config: BTreeMap<String, usize> = BTreeMap::new();
    for config in configs.iter() {
        t_per_config.insert(config.name.clone(), 0);
    }
    for &(ci, _) in &partition.si {
        *t_per_config.get_mut(&configs[ci].name).unwrap() += 1;
    }
    let sum_t: usize = t_per_config.values().sum();
    let t_prime = plan.all_groups().len();
    let reduction = if sum_t == 0 {
        0.0
    } else {
        1.0 - (t_prime as f64) / (sum_t as f64)
    };
    let report = DedupReport {
        n_configs: configs.len(),
        t_per_config,
        sum_t,
        t_prime,
        reduction,
        si_count: partition.si.len(),
        sd_count: partition.sd.len(),
    };

    Ok((plan, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::buildscan::{extract_targets, parse_compile_db};
    use crate::driver::DriverSpec;
    use serde_json::json;
    use std::path::PathBuf;

    fn fixture_root() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lulesh_shaped")
    }

    /// Build the LULESH-shaped scan: 4 configs (MPI x OpenMP), 5 C++ TUs
    /// each, the OpenMP flag applied globally.
    pub(crate) fn lulesh_scan() -> ScanOutput {
        let root = fixture_root();
        let sources = ["lulesh.cc", "lulesh-init.cc", "lulesh-comm.cc", "lulesh-util.cc", "lulesh-viz.cc"];
        let mut configurations = Vec::new();
        for (mpi, omp) in [(true, true), (true, false), (false, true), (false, false)] {
            let name = format!(
                "mpi_{}_omp_{}",
                if mpi { "on" } else { "off" },
                if omp { "on" } else { "off" }
            );
            let entries: Vec<serde_json::Value> = sources
                .iter()
                .map(|src| {
                    let mut cmd = format!(
                        "clang++ -O2 -I{root}/include",
                        root = root.display()
                    );
                    if mpi {
                        cmd.push_str(" -DUSE_MPI=1");
                    }
                    if omp {
                        cmd.push_str(" -fopenmp");
                    }
                    cmd.push_str(&format!(
                        " -c src/{src} -o build/{name}/{src}.o"
                    ));
                    json!({
                        "directory": root.display().to_string(),
                        "file": format!("src/{src}"),
                        "command": cmd
                    })
                })
                .collect();
            let db = parse_compile_db(&serde_json::Value::Array(entries).to_string()).unwrap();
            let targets = extract_targets(&db, &root).unwrap();
            let mut assignments = BTreeMap::new();
            assignments.insert("mpi".to_string(), if mpi { "on" } else { "off" }.to_string());
            assignments.insert("openmp".to_string(), if omp { "on" } else { "off" }.to_string());
            configurations.push(BuildConfiguration::new(name, assignments, targets));
        }
        ScanOutput {
            build_root: root.display().to_string(),
            configurations,
        }
    }

    #[test]
    fn strip_arch_moves_march_to_profile() {
        let flags = FlagSet(vec!["-O3".into(), "-march=skylake-avx512".into(), "-c".into()]);
        let (residual, profile) = strip_arch_flags(&flags);
        assert_eq!(residual.0, vec!["-O3", "-c"]);
        assert_eq!(profile.tokens, vec!["-march=skylake-avx512"]);
        assert_eq!(profile.reconstruct(&residual), flags);
    }

    #[test]
    fn strip_arch_identity_without_arch_tokens() {
        let flags = FlagSet(vec!["-O2".into(), "-DX=1".into(), "-c".into()]);
        let (residual, profile) = strip_arch_flags(&flags);
        assert!(profile.is_empty());
        assert_eq!(residual, flags);
        assert_eq!(profile.reconstruct(&residual), flags);
    }

    #[test]
    fn strip_arch_keeps_macro_definitions() {
        let flags = FlagSet(vec!["-mavx2".into(), "-mfma".into(), "-DGMX_SIMD=AVX2_256".into()]);
        let (residual, profile) = strip_arch_flags(&flags);
        assert_eq!(profile.tokens, vec!["-mavx2", "-mfma"]);
        assert_eq!(residual.0, vec!["-DGMX_SIMD=AVX2_256"]);
        assert_eq!(profile.reconstruct(&residual), flags);
    }

    #[test]
    fn classify_detects_pragma() {
        assert!(classify_openmp("int f();\n#pragma omp parallel for\nfor (;;) {}\n"));
        assert!(classify_openmp("  #  pragma   omp simd\n"));
    }

    #[test]
    fn classify_plain_kernel_false() {
        assert!(!classify_openmp("double s = 0;\nfor (int i = 0; i < n; i++) s += a[i];\n"));
        // "omp" substrings in strings or other identifiers do not count
        assert!(!classify_openmp("const char *s = \"omp_get_num_threads\";\nint computed;\n"));
        assert!(!classify_openmp("int ompx_value = 3;\n"));
    }

    #[test]
    fn classify_detects_api_calls() {
        assert!(classify_openmp("int n = omp_get_num_threads();\n"));
    }

    #[test]
    fn normalize_openmp_decisions() {
        let with = FlagSet(vec!["-O2".into(), "-fopenmp".into()]);
        let without = FlagSet(vec!["-O2".into()]);
        assert_eq!(
            normalize_openmp(&with, &without, "int plain;\n").unwrap(),
            MergeDecision::Merge
        );
        assert_eq!(
            normalize_openmp(&with, &without, "#pragma omp parallel\n").unwrap(),
            MergeDecision::Distinct
        );
        let o3 = FlagSet(vec!["-O3".into()]);
        assert!(matches!(
            normalize_openmp(&with, &o3, "int plain;\n"),
            Err(DedupError::PreconditionViolated(_))
        ));
        assert!(matches!(
            normalize_openmp(&with, &with, "int plain;\n"),
            Err(DedupError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn line_marker_normalization() {
        let text = "# 1 \"/xaas/build/src/a.c\"\nint x;\n#line 4 \"/xaas/build/inc/h.h\"\nchar *p = \"/xaas/build/not-a-marker\";\n";
        let normalized = normalize_line_markers(text, "/xaas/build");
        assert!(normalized.contains("# 1 \"«BUILD»/src/a.c\""));
        assert!(normalized.contains("#line 4 \"«BUILD»/inc/h.h\""));
        // only marker lines are rewritten
        assert!(normalized.contains("char *p = \"/xaas/build/not-a-marker\";"));
    }

    #[test]
    fn lulesh_shaped_reduces_20_to_14() {
        let scan = lulesh_scan();
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        assert_eq!(report.n_configs, 4);
        assert_eq!(report.sum_t, 20);
        assert_eq!(report.t_prime, 14);
        assert!((report.reduction - 0.3).abs() < 1e-12);
        assert_eq!(report.sd_count, 0);
        // no key spans all four configurations: the MPI define stays in
        // the residual flags
        assert!(plan.core.is_empty());
        assert_eq!(plan.all_groups().len(), 14);
    }

    #[test]
    fn single_configuration_no_reduction() {
        let mut scan = lulesh_scan();
        scan.configurations.truncate(1);
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        assert_eq!(report.sum_t, 5);
        assert_eq!(report.t_prime, 5);
        assert_eq!(report.reduction, 0.0);
        assert_eq!(report.to_json().contains("\"reduction\": \"0.0000\""), true);
        // a single configuration trivially spans "all" configs
        assert_eq!(plan.core.len(), 5);
    }

    #[test]
    fn identical_databases_share_everything() {
        let mut scan = lulesh_scan();
        scan.configurations.truncate(1);
        let mut clone = scan.configurations[0].clone();
        clone.name = "copy".into();
        scan.configurations.push(clone);
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        assert_eq!(report.sum_t, 10);
        assert_eq!(report.t_prime, 5);
        assert_eq!(plan.core.len(), 5);
        assert!(plan.deltas.is_empty());
        for group in &plan.core {
            assert_eq!(group.members.len(), 2);
        }
    }

    #[test]
    fn arch_variants_share_ir() {
        // same database twice, differing only in -march: everything merges
        let root = fixture_root();
        let mk = |march: &str, name: &str| {
            let entries: Vec<serde_json::Value> = ["lulesh-comm.cc", "lulesh-util.cc"]
                .iter()
                .map(|src| {
                    json!({
                        "directory": root.display().to_string(),
                        "file": format!("src/{src}"),
                        "command": format!(
                            "clang++ -O2 {march} -I{}/include -c src/{src} -o build/{name}/{src}.o",
                            root.display()
                        )
                    })
                })
                .collect();
            let db = parse_compile_db(&serde_json::Value::Array(entries).to_string()).unwrap();
            BuildConfiguration::new(
                name.to_string(),
                BTreeMap::new(),
                extract_targets(&db, &root).unwrap(),
            )
        };
        let scan = ScanOutput {
            build_root: root.display().to_string(),
            configurations: vec![mk("-march=haswell", "hsw"), mk("-march=skylake-avx512", "skx")],
        };
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        assert_eq!(report.sum_t, 4);
        assert_eq!(report.t_prime, 2);
        assert_eq!(plan.core.len(), 2);
        // arch profiles preserved per placement
        let hsw = &plan.placements["hsw"][0];
        assert_eq!(hsw.arch_profile.tokens, vec!["-march=haswell"]);
        let skx = &plan.placements["skx"][0];
        assert_eq!(skx.arch_profile.tokens, vec!["-march=skylake-avx512"]);
    }

    #[test]
    fn cuda_targets_never_merge_across_backends() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("kernel.cu"), "int device_stub;\n").unwrap();
        let mk = |backend: &str, name: &str| {
            let entries = json!([{
                "directory": dir.path().display().to_string(),
                "file": "kernel.cu",
                "command": "clang++ -O2 --cuda-gpu-arch=sm_80 -c kernel.cu -o kernel.o"
            }]);
            let db = parse_compile_db(&entries.to_string()).unwrap();
            let mut assignments = BTreeMap::new();
            assignments.insert("gpu".to_string(), backend.to_string());
            BuildConfiguration::new(
                name.to_string(),
                assignments,
                extract_targets(&db, dir.path()).unwrap(),
            )
        };
        let scan = ScanOutput {
            build_root: dir.path().display().to_string(),
            configurations: vec![mk("CUDA", "cuda_cfg"), mk("HIP", "hip_cfg")],
        };
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        // identical text and flags, but different backend assignments
        assert_eq!(report.t_prime, 2);
        assert!(plan.core.is_empty());
        let group = &plan.deltas["cuda_cfg"][0];
        assert_eq!(group.key.cuda_arches, vec!["--cuda-gpu-arch=sm_80"]);
        assert_eq!(group.key.gpu_backend.as_deref(), Some("CUDA"));
    }

    #[test]
    fn partition_rules() {
        let root = fixture_root();
        let entries = json!([
            {"directory": root.display().to_string(), "file": "src/lulesh-util.cc",
             "command": format!("clang++ -I{}/include -c src/lulesh-util.cc -o u.o", root.display())},
            {"directory": root.display().to_string(), "file": "asm.s",
             "command": "cc -c asm.s -o asm.o"},
        ]);
        let db = parse_compile_db(&entries.to_string()).unwrap();
        let targets = extract_targets(&db, &root).unwrap();
        let config = BuildConfiguration::new("only".into(), BTreeMap::new(), targets);
        let driver = ToolchainDriver::new(DriverSpec::Builtin);

        // assembly is SD, C++ is SI; empty user list
        let partition = partition_targets(std::slice::from_ref(&config), &[], &driver).unwrap();
        assert_eq!(partition.si.len(), 1);
        assert_eq!(partition.sd.len(), 1);

        // user-declared SD wins
        let user = vec![(config.targets[0].source.clone(), config.targets[0].output.clone())];
        let partition = partition_targets(std::slice::from_ref(&config), &user, &driver).unwrap();
        assert_eq!(partition.si.len(), 0);

        // unknown ids are rejected
        let bogus = vec![("nope.c".to_string(), "nope.o".to_string())];
        assert!(matches!(
            partition_targets(std::slice::from_ref(&config), &bogus, &driver),
            Err(DedupError::UnknownTargetId(_, _))
        ));
    }

    #[test]
    fn sd_targets_excluded_from_hashing_but_counted() {
        let root = fixture_root();
        let entries = json!([
            {"directory": root.display().to_string(), "file": "src/lulesh-util.cc",
             "command": format!("clang++ -I{}/include -c src/lulesh-util.cc -o u.o", root.display())},
            {"directory": root.display().to_string(), "file": "asm.s",
             "command": "cc -c asm.s -o asm.o"},
        ]);
        let db = parse_compile_db(&entries.to_string()).unwrap();
        let targets = extract_targets(&db, &root).unwrap();
        let scan = ScanOutput {
            build_root: root.display().to_string(),
            configurations: vec![BuildConfiguration::new("only".into(), BTreeMap::new(), targets)],
        };
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        assert_eq!(report.si_count, 1);
        assert_eq!(report.sd_count, 1);
        assert_eq!(report.sum_t, 1);
        assert_eq!(report.t_prime, 1);
        assert_eq!(plan.sd_targets["only"].len(), 1);
        assert_eq!(plan.sd_targets["only"][0].language, Language::Other);
        // placements cover both targets exactly once
        assert_eq!(plan.placements["only"].len(), 2);
    }

    #[test]
    fn driver_failure_fails_fast() {
        let mut scan = lulesh_scan();
        // break one source path
        scan.configurations[0].targets[0].source = "«BUILD»/src/missing.cc".into();
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let err = dedup(&scan, &driver, &DedupOptions::default()).unwrap_err();
        assert!(matches!(err, DedupError::Driver { .. }));
    }

    #[test]
    fn determinism_across_job_counts() {
        let scan = lulesh_scan();
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (plan_serial, report_serial) =
            dedup(&scan, &driver, &DedupOptions { jobs: 1, user_sd: vec![] }).unwrap();
        let (plan_par, report_par) =
            dedup(&scan, &driver, &DedupOptions { jobs: 4, user_sd: vec![] }).unwrap();
        assert_eq!(plan_serial, plan_par);
        assert_eq!(report_serial.to_json(), report_par.to_json());
    }

    #[test]
    fn hypothesis_one_holds_on_shared_fixtures() {
        let scan = lulesh_scan();
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let (_, report) = dedup(&scan, &driver, &DedupOptions::default()).unwrap();
        assert!(report.t_prime < report.sum_t);
        assert!(report.t_prime <= report.sum_t);
        assert!(report.reduction >= 0.0 && report.reduction < 1.0);
    }
}
