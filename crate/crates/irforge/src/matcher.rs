//! Intersection of an application catalog with target-system features, and
//! resolution of user/operator selections into a concrete configuration.
//!
//! The intersection keeps exactly the catalog options the target can honor:
//! GPU backends with a sufficient runtime version, vectorization levels whose
//! ISA feature tokens are all present, libraries the system reports (or that
//! the application builds internally). Resolution then picks one value per
//! specialization point with precedence user > operator > catalog default.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::SpecializationCatalog;
use crate::sysprobe::SystemFeatureReport;
use crate::version::version_at_least;

/// Vectorization-level requirements and codegen flags. Ships as editable
/// data: levels absent from the table are dropped from intersections with a
/// warning (fail-closed), and an empty `requires` list marks a level as
/// requirement-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorLevelTable {
    pub levels: BTreeMap<String, VectorLevel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorLevel {
    /// CPU feature tokens that must all be present in the feature report.
    pub requires: Vec<String>,
    /// Codegen flags applied when lowering for this level.
    pub codegen: Vec<String>,
}

pub const VECTOR_LEVELS_TEXT: &str = include_str!("../assets/vector_levels.json");

impl VectorLevelTable {
    /// The table bundled with the crate.
    pub fn builtin() -> Self {
        serde_json::from_str(VECTOR_LEVELS_TEXT).expect("bundled vector table parses")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn get(&self, level: &str) -> Option<&VectorLevel> {
        self.levels.get(level)
    }

    /// Codegen flags for a level, when the table knows it.
    pub fn codegen_flags(&self, level: &str) -> Option<&[String]> {
        self.levels.get(level).map(|l| l.codegen.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GpuIntersection {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LibraryGroup {
    Fft,
    LinearAlgebra,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryIntersection {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<String>,
    pub group: LibraryGroup,
}

/// The catalog options supported by a concrete target system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CommonSpecialization {
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub vectorization_flags: BTreeMap<String, Option<String>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub gpu_backends: BTreeMap<String, GpuIntersection>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub parallel: BTreeMap<String, Option<String>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub libraries: BTreeMap<String, LibraryIntersection>,
    /// Catalog defaults that survived intersection, keyed by point name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub defaults: BTreeMap<String, String>,
}

/// File wrapper matching the published intersection layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonSpecializationDoc {
    pub common_specialization: CommonSpecialization,
}

impl CommonSpecialization {
    pub fn to_document(&self) -> String {
        let doc = CommonSpecializationDoc { common_specialization: self.clone() };
        let mut text = serde_json::to_string_pretty(&doc).expect("intersection serializes");
        text.push('\n');
        text
    }

    pub fn from_document(text: &str) -> Result<Self, serde_json::Error> {
        let doc: CommonSpecializationDoc = serde_json::from_str(text)?;
        Ok(doc.common_specialization)
    }

    pub fn is_empty(&self) -> bool {
        self.vectorization_flags.is_empty()
            && self.gpu_backends.is_empty()
            && self.parallel.is_empty()
            && self.libraries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectOutcome {
    pub common: CommonSpecialization,
    /// Dropped-option diagnostics; not part of the serialized intersection.
    pub warnings: Vec<String>,
}

fn fold(name: &str) -> String {
    name.to_lowercase().replace('-', "_")
}

/// Intersect a validated catalog with a feature report. An empty
/// intersection is a valid result; options dropped for non-obvious reasons
/// (unknown vectorization level, unknown version) produce warnings.
pub fn intersect(
    catalog: &SpecializationCatalog,
    features: &SystemFeatureReport,
    table: &VectorLevelTable,
) -> IntersectOutcome {
    let mut common = CommonSpecialization::default();
    let mut warnings = Vec::new();

    for (level, entry) in &catalog.simd_vectorization {
        match table.get(level) {
            Some(spec) => {
                let satisfied = spec
                    .requires
                    .iter()
                    .all(|token| features.cpu.vector_features.contains(token));
                if satisfied {
                    common
                        .vectorization_flags
                        .insert(level.clone(), entry.build_flag.clone());
                    if entry.default {
                        common.defaults.insert("simd".into(), level.clone());
                    }
                }
            }
            None => warnings.push(format!(
                "vectorization level {level} unknown to the requirement table; dropped"
            )),
        }
    }

    for (backend, entry) in &catalog.gpu_backends {
        let Some((_, info)) = features.gpu_backend(backend) else {
            continue;
        };
        let version_ok = match (&entry.minimum_version, &info.version) {
            (None, _) => true,
            (Some(min), Some(have)) => version_at_least(have, min),
            (Some(min), None) => {
                warnings.push(format!(
                    "gpu backend {backend} requires >= {min} but the report has no version; dropped"
                ));
                false
            }
        };
        if version_ok {
            common.gpu_backends.insert(
                backend.clone(),
                GpuIntersection { version: info.version.clone(), flag: entry.build_flag.clone() },
            );
            if entry.used_as_default {
                common.defaults.insert("gpu".into(), backend.clone());
            }
        }
    }

    for (name, entry) in &catalog.parallel_programming_libraries {
        let Some(reported) = features.has_library(name) else {
            continue;
        };
        let version_ok = match (&entry.minimum_version, reported) {
            (None, _) => true,
            (Some(min), Some(have)) => version_at_least(have, min),
            (Some(min), None) => {
                warnings.push(format!(
                    "parallel library {name} requires >= {min} but the report has no version; dropped"
                ));
                false
            }
        };
        if version_ok {
            common.parallel.insert(name.clone(), entry.build_flag.clone());
            if entry.used_as_default {
                common.defaults.insert(fold(name), "on".into());
            }
        }
    }

    for (name, entry) in &catalog.fft_libraries {
        let built_in = entry.built_in.unwrap_or(false);
        if built_in || features.has_library(name).is_some() {
            common.libraries.insert(
                name.clone(),
                LibraryIntersection { flag: entry.build_flag.clone(), group: LibraryGroup::Fft },
            );
            if entry.used_as_default {
                common.defaults.insert("fft".into(), name.clone());
            }
        }
    }

    for (name, entry) in &catalog.linear_algebra_libraries {
        if features.has_library(name).is_some() {
            common.libraries.insert(
                name.clone(),
                LibraryIntersection {
                    flag: entry.build_flag.clone(),
                    group: LibraryGroup::LinearAlgebra,
                },
            );
            if entry.used_as_default {
                common.defaults.insert("linear_algebra".into(), name.clone());
            }
        }
    }

    for (name, entry) in &catalog.other_external_libraries {
        let Some(reported) = features.has_library(name) else {
            continue;
        };
        let version_ok = if entry.version.is_empty() {
            true
        } else {
            match reported {
                Some(have) => version_at_least(have, &entry.version),
                None => true,
            }
        };
        if version_ok {
            common.libraries.insert(
                name.clone(),
                LibraryIntersection { flag: entry.build_flag.clone(), group: LibraryGroup::Other },
            );
            if entry.used_as_default {
                common.defaults.insert(fold(name), "on".into());
            }
        }
    }

    IntersectOutcome { common, warnings }
}

// --- Selection resolution -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    User,
    Operator,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub point: String,
    pub value: String,
    pub provenance: Provenance,
}

/// Canonical ordering rank of a specialization point: gpu, vectorization,
/// parallel, libraries, other.
pub fn point_rank(point: &str) -> u8 {
    match fold(point).as_str() {
        "gpu" => 0,
        "simd" | "vectorization" => 1,
        "mpi" | "openmp" | "thread_mpi" | "threads" | "pthread" | "pthreads" | "openacc" => 2,
        "fft" | "linear_algebra" => 3,
        _ => 4,
    }
}

/// One concrete assignment of specialization points, in canonical point
/// order so derived artifacts (image tags, plans) are deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ResolvedConfig {
    pub assignments: Vec<Assignment>,
}

impl ResolvedConfig {
    pub fn get(&self, point: &str) -> Option<&str> {
        let folded = fold(point);
        self.assignments
            .iter()
            .find(|a| fold(&a.point) == folded)
            .map(|a| a.value.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Sort assignments into canonical point order.
    pub fn canonicalize(&mut self) {
        self.assignments
            .sort_by(|a, b| (point_rank(&a.point), &a.point).cmp(&(point_rank(&b.point), &b.point)));
    }

    /// Point/value pairs only, ignoring provenance.
    pub fn assignment_pairs(&self) -> Vec<(String, String)> {
        self.assignments
            .iter()
            .map(|a| (a.point.clone(), a.value.clone()))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("unknown specialization point: {0}")]
    UnknownPoint(String),
    #[error("unsupported value {value} for {point}; available: {available:?}")]
    UnsupportedValue {
        point: String,
        value: String,
        available: Vec<String>,
    },
    #[error("mandatory point {0} unresolved")]
    UnresolvedMandatory(String),
}

struct PointSpec {
    name: String,
    available: Vec<String>,
    default: Option<String>,
    /// Implicitly resolved when nothing else decides (on/off points and
    /// sole-option fallbacks).
    implicit: Option<String>,
    mandatory: bool,
}

fn build_points(common: &CommonSpecialization) -> Vec<PointSpec> {
    let mut points = Vec::new();

    if !common.gpu_backends.is_empty() {
        let available: Vec<String> = common.gpu_backends.keys().cloned().collect();
        let implicit = if available.len() == 1 {
            Some(available[0].clone())
        } else {
            None
        };
        points.push(PointSpec {
            name: "gpu".into(),
            default: common.defaults.get("gpu").cloned(),
            implicit,
            mandatory: true,
            available,
        });
    }

    if !common.vectorization_flags.is_empty() {
        let available: Vec<String> = common.vectorization_flags.keys().cloned().collect();
        let implicit = if available.len() == 1 {
            Some(available[0].clone())
        } else {
            None
        };
        points.push(PointSpec {
            name: "simd".into(),
            default: common.defaults.get("simd").cloned(),
            implicit,
            mandatory: false,
            available,
        });
    }

    for name in common.parallel.keys() {
        let folded = fold(name);
        points.push(PointSpec {
            name: folded.clone(),
            available: vec!["on".into(), "off".into()],
            default: common.defaults.get(&folded).cloned(),
            implicit: Some("off".into()),
            mandatory: false,
        });
    }

    for group in [LibraryGroup::Fft, LibraryGroup::LinearAlgebra] {
        let members: Vec<String> = common
            .libraries
            .iter()
            .filter(|(_, v)| v.group == group)
            .map(|(k, _)| k.clone())
            .collect();
        if members.is_empty() {
            continue;
        }
        let name = match group {
            LibraryGroup::Fft => "fft",
            LibraryGroup::LinearAlgebra => "linear_algebra",
            LibraryGroup::Other => unreachable!(),
        };
        let implicit = if members.len() == 1 {
            Some(members[0].clone())
        } else {
            None
        };
        points.push(PointSpec {
            name: name.into(),
            default: common.defaults.get(name).cloned(),
            implicit,
            mandatory: false,
            available: members,
        });
    }

    for (name, entry) in &common.libraries {
        if entry.group != LibraryGroup::Other {
            continue;
        }
        let folded = fold(name);
        points.push(PointSpec {
            name: folded.clone(),
            available: vec!["on".into(), "off".into()],
            default: common.defaults.get(&folded).cloned(),
            implicit: Some("off".into()),
            mandatory: false,
        });
    }

    points
}

fn canonical_point_name(requested: &str) -> String {
    let folded = fold(requested);
    if folded == "vectorization" {
        "simd".into()
    } else {
        folded
    }
}

/// Resolve selections against an intersection. Precedence is user >
/// operator > catalog default; a single surviving option resolves itself.
/// The GPU backend is mandatory whenever the intersection offers one
/// (selecting the value `none` opts out explicitly).
pub fn resolve(
    common: &CommonSpecialization,
    choices: &BTreeMap<String, String>,
    operator_prefs: Option<&BTreeMap<String, String>>,
) -> Result<ResolvedConfig, ResolveError> {
    let points = build_points(common);
    let known: BTreeMap<String, usize> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();

    let mut normalized_choices: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in choices {
        let name = canonical_point_name(k);
        if !known.contains_key(&name) {
            return Err(ResolveError::UnknownPoint(k.clone()));
        }
        normalized_choices.insert(name, v.clone());
    }
    let mut normalized_prefs: BTreeMap<String, String> = BTreeMap::new();
    if let Some(prefs) = operator_prefs {
        for (k, v) in prefs {
            let name = canonical_point_name(k);
            // Operator preferences for points the intersection dropped are
            // ignored rather than fatal; the operator file is system-wide.
            if known.contains_key(&name) {
                normalized_prefs.insert(name, v.clone());
            }
        }
    }

    let mut config = ResolvedConfig::default();
    for point in &points {
        let (raw_value, provenance) = if let Some(v) = normalized_choices.get(&point.name) {
            (Some(v.clone()), Provenance::User)
        } else if let Some(v) = normalized_prefs.get(&point.name) {
            (Some(v.clone()), Provenance::Operator)
        } else if let Some(v) = &point.default {
            (Some(v.clone()), Provenance::Default)
        } else if let Some(v) = &point.implicit {
            (Some(v.clone()), Provenance::Default)
        } else {
            (None, Provenance::Default)
        };

        let Some(raw_value) = raw_value else {
            if point.mandatory {
                return Err(ResolveError::UnresolvedMandatory(point.name.clone()));
            }
            continue;
        };

        if fold(&raw_value) == "none" {
            continue;
        }

        let matched = point
            .available
            .iter()
            .find(|option| fold(option) == fold(&raw_value));
        let Some(value) = matched else {
            return Err(ResolveError::UnsupportedValue {
                point: point.name.clone(),
                value: raw_value,
                available: point.available.clone(),
            });
        };

        if value == "off" {
            // off-valued toggles stay explicit so configurations remain
            // distinguishable at deployment
        }
        config.assignments.push(Assignment {
            point: point.name.clone(),
            value: value.clone(),
            provenance,
        });
    }

    config.canonicalize();
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::validate_catalog;
    use crate::sysprobe::{discover_system, ProbeInput};
    use proptest::prelude::*;

    fn fig5a() -> SpecializationCatalog {
        validate_catalog(include_str!("../tests/fixtures/fig5a_catalog.json")).unwrap()
    }

    fn fig5b() -> SystemFeatureReport {
        let bundle = serde_json::from_str(include_str!("../tests/fixtures/fig5b_features.json")).unwrap();
        discover_system(&ProbeInput::declared(bundle)).unwrap()
    }

    #[test]
    fn fig5_intersection_matches_fig5c() {
        let outcome = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin());
        let common = &outcome.common;
        let levels: Vec<&str> = common.vectorization_flags.keys().map(String::as_str).collect();
        assert_eq!(levels, vec!["AVX2_256", "AVX_512", "SSE4.1"]);
        assert_eq!(
            common.vectorization_flags["AVX_512"].as_deref(),
            Some("-DGMX_SIMD=AVX_512")
        );
        assert_eq!(common.gpu_backends.len(), 1);
        let cuda = &common.gpu_backends["CUDA"];
        assert_eq!(cuda.version.as_deref(), Some("12.1"));
        assert_eq!(cuda.flag.as_deref(), Some("-DGMX_GPU=CUDA"));
        // HIP requires 5.4.3 and the system has no HIP at all.
        assert!(!common.gpu_backends.contains_key("HIP"));
        // "None" is not in the requirement table, so it is dropped loudly.
        assert!(outcome.warnings.iter().any(|w| w.contains("None")));
    }

    #[test]
    fn empty_report_keeps_only_requirement_free_levels() {
        let mut table = VectorLevelTable::builtin();
        table.levels.insert(
            "None".into(),
            VectorLevel { requires: vec![], codegen: vec![] },
        );
        let features = SystemFeatureReport::default();
        let outcome = intersect(&fig5a(), &features, &table);
        let levels: Vec<&str> = outcome.common.vectorization_flags.keys().map(String::as_str).collect();
        assert_eq!(levels, vec!["None"]);
        assert!(outcome.common.gpu_backends.is_empty());
    }

    #[test]
    fn insufficient_version_drops_backend() {
        let mut features = fig5b();
        features.gpu_backends.insert(
            "HIP".into(),
            crate::sysprobe::GpuBackendInfo { version: Some("5.3".into()), ..Default::default() },
        );
        let outcome = intersect(&fig5a(), &features, &VectorLevelTable::builtin());
        // 5.3.0 < 5.4.3 per dotted-tuple comparison.
        assert!(!outcome.common.gpu_backends.contains_key("HIP"));
        assert!(outcome.common.gpu_backends.contains_key("CUDA"));
    }

    #[test]
    fn built_in_fft_survives_without_system_support() {
        let mut catalog = fig5a();
        catalog.fft_libraries.get_mut("fftw3").unwrap().built_in = Some(true);
        let outcome = intersect(&catalog, &SystemFeatureReport::default(), &VectorLevelTable::builtin());
        assert!(outcome.common.libraries.contains_key("fftw3"));
    }

    #[test]
    fn resolve_picks_sole_gpu_and_user_simd() {
        let common = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin()).common;
        let choices = BTreeMap::from([("vectorization".to_string(), "AVX_512".to_string())]);
        let config = resolve(&common, &choices, None).unwrap();
        assert_eq!(config.get("gpu"), Some("CUDA"));
        assert_eq!(config.get("simd"), Some("AVX_512"));
        let gpu = &config.assignments[0];
        assert_eq!(gpu.point, "gpu");
        assert_eq!(gpu.provenance, Provenance::Default);
        let simd = &config.assignments[1];
        assert_eq!(simd.provenance, Provenance::User);
    }

    #[test]
    fn unsupported_value_lists_available_options() {
        let common = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin()).common;
        let choices = BTreeMap::from([("simd".to_string(), "ARM_NEON_ASIMD".to_string())]);
        let err = resolve(&common, &choices, None).unwrap_err();
        match err {
            ResolveError::UnsupportedValue { point, available, .. } => {
                assert_eq!(point, "simd");
                assert_eq!(available, vec!["AVX2_256", "AVX_512", "SSE4.1"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn operator_preference_overrides_catalog_default() {
        let mut common = CommonSpecialization::default();
        common.libraries.insert(
            "fftw3".into(),
            LibraryIntersection { flag: Some("-DGMX_FFT_LIBRARY=fftw3".into()), group: LibraryGroup::Fft },
        );
        common.libraries.insert(
            "MKL".into(),
            LibraryIntersection { flag: Some("-DGMX_FFT_LIBRARY=mkl".into()), group: LibraryGroup::Fft },
        );
        common.defaults.insert("fft".into(), "fftw3".into());
        let prefs = BTreeMap::from([("fft".to_string(), "MKL".to_string())]);
        let config = resolve(&common, &BTreeMap::new(), Some(&prefs)).unwrap();
        assert_eq!(config.get("fft"), Some("MKL"));
        assert_eq!(config.assignments[0].provenance, Provenance::Operator);
        // user choice beats the operator
        let choices = BTreeMap::from([("fft".to_string(), "fftw3".to_string())]);
        let config = resolve(&common, &choices, Some(&prefs)).unwrap();
        assert_eq!(config.get("fft"), Some("fftw3"));
    }

    #[test]
    fn unknown_point_rejected() {
        let common = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin()).common;
        let choices = BTreeMap::from([("nonsense".to_string(), "x".to_string())]);
        assert_eq!(
            resolve(&common, &choices, None),
            Err(ResolveError::UnknownPoint("nonsense".into()))
        );
    }

    #[test]
    fn unresolved_mandatory_gpu() {
        let mut common = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin()).common;
        common.gpu_backends.insert(
            "OpenCL".into(),
            GpuIntersection { version: Some("3.0".into()), flag: Some("-DGMX_GPU=OpenCL".into()) },
        );
        // two backends, no default, no choice
        let err = resolve(&common, &BTreeMap::new(), None).unwrap_err();
        assert_eq!(err, ResolveError::UnresolvedMandatory("gpu".into()));
        // explicit opt-out works
        let choices = BTreeMap::from([("gpu".to_string(), "none".to_string())]);
        let config = resolve(&common, &choices, None).unwrap();
        assert_eq!(config.get("gpu"), None);
    }

    #[test]
    fn resolution_is_deterministic() {
        let common = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin()).common;
        let choices = BTreeMap::from([("simd".to_string(), "AVX2_256".to_string())]);
        let a = resolve(&common, &choices, None).unwrap();
        let b = resolve(&common, &choices, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_points_resolve_on_off() {
        let mut common = CommonSpecialization::default();
        common.parallel.insert("MPI".into(), Some("-DGMX_MPI=ON".into()));
        common.parallel.insert("OpenMP".into(), Some("-DGMX_OPENMP=ON".into()));
        common.defaults.insert("openmp".into(), "on".into());
        let config = resolve(&common, &BTreeMap::new(), None).unwrap();
        assert_eq!(config.get("mpi"), Some("off"));
        assert_eq!(config.get("openmp"), Some("on"));
        let choices = BTreeMap::from([("mpi".to_string(), "on".to_string())]);
        let config = resolve(&common, &choices, None).unwrap();
        assert_eq!(config.get("mpi"), Some("on"));
    }

    #[test]
    fn intersection_document_shape() {
        let common = intersect(&fig5a(), &fig5b(), &VectorLevelTable::builtin()).common;
        let text = common.to_document();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.get("common_specialization").is_some());
        let inner = &value["common_specialization"];
        assert!(inner.get("vectorization_flags").is_some());
        assert!(inner.get("gpu_backends").is_some());
        // empty sections are omitted entirely
        assert!(inner.get("parallel").is_none());
        let reparsed = CommonSpecialization::from_document(&text).unwrap();
        assert_eq!(common, reparsed);
    }

    fn small_report(features: &[&str], cuda: Option<&str>) -> SystemFeatureReport {
        let mut report = SystemFeatureReport::default();
        report.cpu.architecture = "x86_64".into();
        for f in features {
            report.cpu.vector_features.insert(f.to_string());
        }
        if let Some(v) = cuda {
            report.gpu_backends.insert(
                "CUDA".into(),
                crate::sysprobe::GpuBackendInfo { version: Some(v.into()), ..Default::default() },
            );
        }
        report
    }

    proptest! {
        // Subset law: every intersection entry comes from the catalog.
        #[test]
        fn intersection_is_subset_of_catalog(
            feats in proptest::collection::vec(
                proptest::sample::select(vec!["sse4_1", "avx", "avx2", "avx512f", "asimd"]),
                0..5
            ),
            cuda in proptest::option::of(proptest::sample::select(vec!["11.0", "12.1", "12.4"])),
        ) {
            let catalog = fig5a();
            let report = small_report(&feats, cuda.as_deref());
            let outcome = intersect(&catalog, &report, &VectorLevelTable::builtin());
            for level in outcome.common.vectorization_flags.keys() {
                prop_assert!(catalog.simd_vectorization.contains_key(level));
            }
            for backend in outcome.common.gpu_backends.keys() {
                prop_assert!(catalog.gpu_backends.contains_key(backend));
            }
        }

        // Monotonicity: adding features never shrinks the intersection.
        #[test]
        fn intersection_monotone(
            feats in proptest::collection::vec(
                proptest::sample::select(vec!["sse4_1", "avx", "avx2", "avx512f", "fma"]),
                0..5
            ),
            extra in proptest::sample::select(vec!["sse4_1", "avx", "avx2", "avx512f", "fma"]),
        ) {
            let catalog = fig5a();
            let small = small_report(&feats, None);
            let mut bigger = small.clone();
            bigger.cpu.vector_features.insert(extra.to_string());
            bigger.gpu_backends.insert(
                "CUDA".into(),
                crate::sysprobe::GpuBackendInfo { version: Some("12.1".into()), ..Default::default() },
            );
            let a = intersect(&catalog, &small, &VectorLevelTable::builtin()).common;
            let b = intersect(&catalog, &bigger, &VectorLevelTable::builtin()).common;
            for level in a.vectorization_flags.keys() {
                prop_assert!(b.vectorization_flags.contains_key(level));
            }
            for backend in a.gpu_backends.keys() {
                prop_assert!(b.gpu_backends.contains_key(backend));
            }
        }
    }
}
