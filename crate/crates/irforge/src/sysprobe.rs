//! Target-system feature discovery.
//!
//! Deployment decisions need to know what the target actually offers: CPU
//! vector features, GPU runtimes, libraries, toolchains. Features come from
//! live probes of the host, from a declared bundle supplied by a system
//! operator, or both — declared entries always win over live probes for
//! overlapping keys. Environment inference fills in conventional knowledge:
//! a CUDA installation implies cuFFT, a ROCm installation implies rocFFT.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("live probing unavailable: {0}")]
    ProbeUnavailable(String),
    #[error("malformed probe bundle: {0}")]
    MalformedBundle(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CpuInfo {
    pub architecture: String,
    pub vector_features: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GpuBackendInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub libraries: Vec<String>,
    /// Compute capability of the device, when known (e.g. "8.0").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_capability: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibraryOrigin {
    Probed,
    Inferred,
    Declared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub origin: LibraryOrigin,
    /// The probe entry that triggered an inferred library.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inferred_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolchainInfo {
    pub version: String,
}

/// A declared-vs-probed version disagreement; both values are recorded and
/// the declared one is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionConflict {
    pub declared: String,
    pub probed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SystemFeatureReport {
    pub cpu: CpuInfo,
    pub gpu_backends: BTreeMap<String, GpuBackendInfo>,
    pub libraries: BTreeMap<String, LibraryInfo>,
    pub toolchains: BTreeMap<String, ToolchainInfo>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conflicts: BTreeMap<String, VersionConflict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SystemFeatureReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Case-insensitive lookup of a GPU backend.
    pub fn gpu_backend(&self, name: &str) -> Option<(&String, &GpuBackendInfo)> {
        let folded = name.to_lowercase();
        self.gpu_backends
            .iter()
            .find(|(k, _)| k.to_lowercase() == folded)
    }

    /// Case-insensitive lookup across libraries and toolchains.
    pub fn has_library(&self, name: &str) -> Option<Option<&str>> {
        let folded = fold_name(name);
        if let Some((_, info)) = self.libraries.iter().find(|(k, _)| fold_name(k) == folded) {
            return Some(info.version.as_deref());
        }
        if let Some((_, info)) = self.toolchains.iter().find(|(k, _)| fold_name(k) == folded) {
            return Some(Some(info.version.as_str()));
        }
        None
    }
}

fn fold_name(name: &str) -> String {
    name.to_lowercase().replace('-', "_")
}

/// What to probe: a declared bundle, the live host, or the live host with a
/// declared overlay on top.
#[derive(Debug, Clone, Default)]
pub struct ProbeInput {
    pub declared: Option<Value>,
    pub live: bool,
}

impl ProbeInput {
    pub fn live() -> Self {
        ProbeInput { declared: None, live: true }
    }

    pub fn declared(bundle: Value) -> Self {
        ProbeInput { declared: Some(bundle), live: false }
    }

    pub fn declared_over_live(bundle: Value) -> Self {
        ProbeInput { declared: Some(bundle), live: true }
    }
}

/// Produce a feature report from the requested probes, then apply the
/// inference rules. Deterministic for declared-only input.
pub fn discover_system(input: &ProbeInput) -> Result<SystemFeatureReport, ProbeError> {
    let mut report = if input.live {
        probe_live()?
    } else {
        SystemFeatureReport { cpu: CpuInfo { architecture: "unknown".into(), ..Default::default() }, ..Default::default() }
    };

    if let Some(bundle) = &input.declared {
        overlay_declared(&mut report, bundle)?;
    }

    apply_inference(&mut report);
    Ok(report)
}

/// Conventional shared-object locations checked by the live GPU probe.
const CUDA_RUNTIME_PATHS: &[&str] = &[
    "/lib/libcuda.so.1",
    "/usr/lib64/libcuda.so.1",
    "/usr/lib/x86_64-linux-gnu/libcuda.so.1",
    "/usr/local/cuda/lib64/libcudart.so",
];

const ROCM_RUNTIME_PATHS: &[&str] = &[
    "/opt/rocm/lib/libamdhip64.so",
    "/usr/lib/x86_64-linux-gnu/libamdhip64.so",
];

fn probe_live() -> Result<SystemFeatureReport, ProbeError> {
    let cpuinfo = std::fs::read_to_string("/proc/cpuinfo")
        .map_err(|e| ProbeError::ProbeUnavailable(format!("/proc/cpuinfo: {e}")))?;
    let mut features = BTreeSet::new();
    for line in cpuinfo.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let key = key.trim().to_lowercase();
        if key == "flags" || key == "features" {
            for token in rest.split_whitespace() {
                features.insert(token.to_lowercase());
            }
            break;
        }
    }

    let mut report = SystemFeatureReport {
        cpu: CpuInfo {
            architecture: std::env::consts::ARCH.to_string(),
            vector_features: features,
        },
        ..Default::default()
    };

    let mut found = |name: &str, paths: &[&str]| {
        let hits: Vec<String> = paths
            .iter()
            .filter(|p| Path::new(p).exists())
            .map(|p| p.to_string())
            .collect();
        if !hits.is_empty() {
            report.gpu_backends.insert(
                name.to_string(),
                GpuBackendInfo { version: None, libraries: hits, device_capability: None },
            );
        }
    };
    found("CUDA", CUDA_RUNTIME_PATHS);
    found("ROCm", ROCM_RUNTIME_PATHS);

    Ok(report)
}

fn as_object<'v>(value: &'v Value, what: &str) -> Result<&'v serde_json::Map<String, Value>, ProbeError> {
    value
        .as_object()
        .ok_or_else(|| ProbeError::MalformedBundle(format!("{what} must be an object")))
}

fn get_any<'v>(map: &'v serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'v Value> {
    keys.iter().find_map(|k| map.get(*k))
}

/// Merge a declared bundle over the current report. Declared keys win;
/// version disagreements are recorded as conflicts with a warning.
fn overlay_declared(report: &mut SystemFeatureReport, bundle: &Value) -> Result<(), ProbeError> {
    let root = as_object(bundle, "bundle")?;

    if let Some(cpu) = get_any(root, &["CPU Info", "cpu", "cpu_info"]) {
        let cpu = as_object(cpu, "cpu section")?;
        if let Some(arch) = get_any(cpu, &["Architecture", "architecture"]).and_then(Value::as_str) {
            report.cpu.architecture = arch.to_string();
        }
        if let Some(vec) = get_any(cpu, &["Vectorization", "vector_features"]) {
            let items = vec
                .as_array()
                .ok_or_else(|| ProbeError::MalformedBundle("vector features must be an array".into()))?;
            for item in items {
                let token = item.as_str().ok_or_else(|| {
                    ProbeError::MalformedBundle("vector feature tokens must be strings".into())
                })?;
                report.cpu.vector_features.insert(token.to_lowercase());
            }
        }
    }

    if let Some(gpus) = get_any(root, &["GPU Backends", "gpu_backends"]) {
        for (name, entry) in as_object(gpus, "gpu backends")? {
            let entry = as_object(entry, "gpu backend entry")?;
            let declared_version = get_any(entry, &["version"]).and_then(Value::as_str);
            let libraries = get_any(entry, &["lib", "libraries"])
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(Value::as_str)
                        .map(str::to_string)
                        .collect::<Vec<_>>()
                })
                .unwrap_or_default();
            let capability = get_any(entry, &["device_capability", "compute_capability"])
                .and_then(Value::as_str)
                .map(str::to_string);

            let slot = report.gpu_backends.entry(name.clone()).or_default();
            if let (Some(declared), Some(probed)) = (declared_version, slot.version.as_deref()) {
                if declared != probed {
                    report.conflicts.insert(
                        format!("gpu_backends/{name}"),
                        VersionConflict { declared: declared.to_string(), probed: probed.to_string() },
                    );
                    report.warnings.push(format!(
                        "declared {name} version {declared} overrides probed {probed}"
                    ));
                }
            }
            if let Some(v) = declared_version {
                slot.version = Some(v.to_string());
            }
            if !libraries.is_empty() {
                slot.libraries = libraries;
            }
            if capability.is_some() {
                slot.device_capability = capability;
            }
        }
    }

    if let Some(libs) = root.get("libraries") {
        for (name, entry) in as_object(libs, "libraries")? {
            let version = match entry {
                Value::String(s) => Some(s.clone()),
                Value::Object(o) => get_any(o, &["version"]).and_then(Value::as_str).map(str::to_string),
                Value::Null => None,
                _ => {
                    return Err(ProbeError::MalformedBundle(format!(
                        "library entry {name} must be a string or object"
                    )))
                }
            };
            if let Some(existing) = report.libraries.get(name) {
                if let (Some(declared), Some(probed)) = (version.as_deref(), existing.version.as_deref()) {
                    if declared != probed {
                        report.conflicts.insert(
                            format!("libraries/{name}"),
                            VersionConflict { declared: declared.to_string(), probed: probed.to_string() },
                        );
                        report
                            .warnings
                            .push(format!("declared {name} version {declared} overrides probed {probed}"));
                    }
                }
            }
            report.libraries.insert(
                name.clone(),
                LibraryInfo { version, origin: LibraryOrigin::Declared, inferred_from: None },
            );
        }
    }

    if let Some(tools) = root.get("toolchains") {
        for (name, entry) in as_object(tools, "toolchains")? {
            let version = match entry {
                Value::String(s) => s.clone(),
                Value::Object(o) => get_any(o, &["version"])
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
                _ => {
                    return Err(ProbeError::MalformedBundle(format!(
                        "toolchain entry {name} must be a string or object"
                    )))
                }
            };
            report.toolchains.insert(name.clone(), ToolchainInfo { version });
        }
    }

    Ok(())
}

/// Standard-environment inference: GPU runtimes imply their FFT libraries.
fn apply_inference(report: &mut SystemFeatureReport) {
    let triggers: Vec<(String, &str)> = report
        .gpu_backends
        .iter()
        .filter_map(|(name, _)| {
            let folded = name.to_lowercase();
            if folded == "cuda" {
                Some((name.clone(), "cuFFT"))
            } else if folded == "rocm" || folded == "hip" {
                Some((name.clone(), "rocFFT"))
            } else {
                None
            }
        })
        .collect();

    for (backend, library) in triggers {
        let version = report
            .gpu_backends
            .get(&backend)
            .and_then(|b| b.version.clone());
        report
            .libraries
            .entry(library.to_string())
            .or_insert_with(|| LibraryInfo {
                version,
                origin: LibraryOrigin::Inferred,
                inferred_from: Some(backend.clone()),
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fig5b() -> Value {
        serde_json::from_str(include_str!("../tests/fixtures/fig5b_features.json")).unwrap()
    }

    #[test]
    fn declared_bundle_matches_expected_report() {
        let report = discover_system(&ProbeInput::declared(fig5b())).unwrap();
        assert_eq!(report.cpu.architecture, "x86_64");
        let features: Vec<&str> = report.cpu.vector_features.iter().map(String::as_str).collect();
        assert_eq!(features, vec!["avx", "avx2", "avx512f", "sse4_1"]);
        let cuda = &report.gpu_backends["CUDA"];
        assert_eq!(cuda.version.as_deref(), Some("12.1"));
        assert_eq!(cuda.libraries, vec!["/lib/libcuda.so.1"]);
        let cufft = &report.libraries["cuFFT"];
        assert_eq!(cufft.origin, LibraryOrigin::Inferred);
        assert_eq!(cufft.inferred_from.as_deref(), Some("CUDA"));
        assert_eq!(cufft.version.as_deref(), Some("12.1"));
    }

    #[test]
    fn empty_bundle_gives_empty_report() {
        let report = discover_system(&ProbeInput::declared(json!({}))).unwrap();
        assert!(report.cpu.vector_features.is_empty());
        assert!(report.gpu_backends.is_empty());
        assert!(report.libraries.is_empty());
        assert!(report.toolchains.is_empty());
    }

    #[test]
    fn rocm_implies_rocfft() {
        let bundle = json!({"GPU Backends": {"ROCm": {"version": "5.4"}}});
        let report = discover_system(&ProbeInput::declared(bundle)).unwrap();
        let rocfft = &report.libraries["rocFFT"];
        assert_eq!(rocfft.origin, LibraryOrigin::Inferred);
        assert_eq!(rocfft.inferred_from.as_deref(), Some("ROCm"));
    }

    #[test]
    fn declared_library_not_overwritten_by_inference() {
        let bundle = json!({
            "GPU Backends": {"CUDA": {"version": "12.1"}},
            "libraries": {"cuFFT": {"version": "11.0"}}
        });
        let report = discover_system(&ProbeInput::declared(bundle)).unwrap();
        let cufft = &report.libraries["cuFFT"];
        assert_eq!(cufft.origin, LibraryOrigin::Declared);
        assert_eq!(cufft.version.as_deref(), Some("11.0"));
    }

    #[test]
    fn determinism_byte_identical() {
        let a = discover_system(&ProbeInput::declared(fig5b())).unwrap().to_json();
        let b = discover_system(&ProbeInput::declared(fig5b())).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_is_monotone_under_added_probes() {
        let small = json!({"CPU Info": {"Vectorization": ["avx"]}});
        let large = json!({
            "CPU Info": {"Vectorization": ["avx", "avx2"]},
            "GPU Backends": {"CUDA": {"version": "12.0"}}
        });
        let r1 = discover_system(&ProbeInput::declared(small)).unwrap();
        let r2 = discover_system(&ProbeInput::declared(large)).unwrap();
        for f in &r1.cpu.vector_features {
            assert!(r2.cpu.vector_features.contains(f));
        }
        for k in r1.libraries.keys() {
            assert!(r2.libraries.contains_key(k));
        }
    }

    #[test]
    fn malformed_bundle_rejected() {
        let bundle = json!({"CPU Info": {"Vectorization": "not-an-array"}});
        assert!(matches!(
            discover_system(&ProbeInput::declared(bundle)),
            Err(ProbeError::MalformedBundle(_))
        ));
    }

    #[test]
    fn round_trip_report_parsing() {
        let report = discover_system(&ProbeInput::declared(fig5b())).unwrap();
        let text = report.to_json();
        let reparsed: SystemFeatureReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report, reparsed);
    }
}
