//! Specialization-point catalogs.
//!
//! A catalog describes an application's build-time option space: GPU
//! backends, parallelism and vectorization choices, library selections, and
//! the flags that enable them. The bundled JSON schema asset is the single
//! source of truth for what a valid catalog document looks like; this module
//! validates documents against it, maps them onto typed structures, and
//! normalizes flag spellings on ingest.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::flags::normalize_flag;
use crate::schema::{self, SchemaViolation};

/// The schema text shipped with the crate, verbatim.
pub const CATALOG_SCHEMA_TEXT: &str = include_str!("../assets/specialization_points.schema.json");

/// Parsed form of [`CATALOG_SCHEMA_TEXT`].
pub fn catalog_schema() -> &'static Value {
    static SCHEMA: OnceLock<Value> = OnceLock::new();
    SCHEMA.get_or_init(|| serde_json::from_str(CATALOG_SCHEMA_TEXT).expect("bundled schema parses"))
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("malformed document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("schema violations: {}", format_violations(.0))]
    Schema(Vec<SchemaViolation>),
    #[error("multiple defaults in {section}: {names:?}")]
    MultipleDefaults { section: String, names: Vec<String> },
}

fn format_violations(violations: &[SchemaViolation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GpuBuild {
    pub value: bool,
    pub build_flag: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

/// Entry shape shared by `gpu_backends` and `parallel_programming_libraries`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BackendOption {
    pub used_as_default: bool,
    pub build_flag: Option<String>,
    pub minimum_version: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LinearAlgebraOption {
    pub used_as_default: bool,
    pub build_flag: Option<String>,
    pub condition: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FftOption {
    #[serde(rename = "built-in", default, skip_serializing_if = "Option::is_none")]
    pub built_in: Option<bool>,
    pub used_as_default: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependencies: Option<String>,
    pub build_flag: Option<String>,
    /// Required by the schema but not a declared property; any JSON value.
    pub condition: Value,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExternalLibrary {
    pub version: String,
    pub used_as_default: bool,
    pub conditions: String,
    pub build_flag: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CompilerRequirement {
    pub minimum_version: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SimdLevel {
    pub build_flag: Option<String>,
    pub default: bool,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BuildSystemKind {
    Cmake,
    Make,
    #[default]
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BuildSystem {
    #[serde(rename = "type")]
    pub kind: BuildSystemKind,
    pub minimum_version: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InternalBuild {
    pub library_name: String,
    pub build_flag: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

/// An application's full build-time option space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SpecializationCatalog {
    pub gpu_build: GpuBuild,
    pub gpu_backends: BTreeMap<String, BackendOption>,
    pub parallel_programming_libraries: BTreeMap<String, BackendOption>,
    pub linear_algebra_libraries: BTreeMap<String, LinearAlgebraOption>,
    #[serde(rename = "FFT_libraries")]
    pub fft_libraries: BTreeMap<String, FftOption>,
    pub other_external_libraries: BTreeMap<String, ExternalLibrary>,
    pub compiler_flags: Vec<String>,
    pub optimization_build_flags: Vec<String>,
    pub compilers: BTreeMap<String, CompilerRequirement>,
    pub architectures: Vec<String>,
    pub simd_vectorization: BTreeMap<String, SimdLevel>,
    pub build_system: BuildSystem,
    pub internal_build: InternalBuild,
}

/// Canonicalize a flag spelling where possible; spellings the normalizer
/// rejects are preserved verbatim so extraction errors stay countable in
/// evaluation instead of aborting the whole document.
fn normalize_or_keep(raw: &str) -> String {
    normalize_flag(raw).map(|f| f.raw()).unwrap_or_else(|_| raw.to_string())
}

fn normalize_opt(flag: &mut Option<String>) {
    if let Some(raw) = flag.as_deref() {
        *flag = Some(normalize_or_keep(raw));
    }
}

impl SpecializationCatalog {
    fn normalize_flags(&mut self) {
        normalize_opt(&mut self.gpu_build.build_flag);
        for entry in self.gpu_backends.values_mut() {
            normalize_opt(&mut entry.build_flag);
        }
        for entry in self.parallel_programming_libraries.values_mut() {
            normalize_opt(&mut entry.build_flag);
        }
        for entry in self.linear_algebra_libraries.values_mut() {
            normalize_opt(&mut entry.build_flag);
        }
        for entry in self.fft_libraries.values_mut() {
            normalize_opt(&mut entry.build_flag);
        }
        for entry in self.other_external_libraries.values_mut() {
            normalize_opt(&mut entry.build_flag);
        }
        for entry in self.simd_vectorization.values_mut() {
            normalize_opt(&mut entry.build_flag);
        }
        normalize_opt(&mut self.internal_build.build_flag);
        for flag in &mut self.compiler_flags {
            *flag = normalize_or_keep(flag);
        }
        for flag in &mut self.optimization_build_flags {
            *flag = normalize_or_keep(flag);
        }
    }

    fn check_single_defaults(&self) -> Result<(), CatalogError> {
        fn check<'a, I>(section: &str, entries: I) -> Result<(), CatalogError>
        where
            I: Iterator<Item = (&'a String, bool)>,
        {
            let defaults: Vec<String> = entries
                .filter(|(_, is_default)| *is_default)
                .map(|(name, _)| name.clone())
                .collect();
            if defaults.len() > 1 {
                return Err(CatalogError::MultipleDefaults {
                    section: section.to_string(),
                    names: defaults,
                });
            }
            Ok(())
        }
        check(
            "gpu_backends",
            self.gpu_backends.iter().map(|(k, v)| (k, v.used_as_default)),
        )?;
        check(
            "parallel_programming_libraries",
            self.parallel_programming_libraries
                .iter()
                .map(|(k, v)| (k, v.used_as_default)),
        )?;
        check(
            "linear_algebra_libraries",
            self.linear_algebra_libraries
                .iter()
                .map(|(k, v)| (k, v.used_as_default)),
        )?;
        check(
            "FFT_libraries",
            self.fft_libraries.iter().map(|(k, v)| (k, v.used_as_default)),
        )?;
        check(
            "other_external_libraries",
            self.other_external_libraries
                .iter()
                .map(|(k, v)| (k, v.used_as_default)),
        )?;
        check(
            "simd_vectorization",
            self.simd_vectorization.iter().map(|(k, v)| (k, v.default)),
        )?;
        Ok(())
    }

    /// Serialize in the document layout (pretty-printed, trailing newline).
    pub fn to_document(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("catalog serializes");
        text.push('\n');
        text
    }
}

/// Validate a catalog document against the bundled schema and construct the
/// typed catalog. Flags are normalized on ingest; explicit `null`s for
/// optional members fold to absent. The schema gate is exhaustive: every
/// violation is reported, not just the first.
pub fn validate_catalog(document: &str) -> Result<SpecializationCatalog, CatalogError> {
    let value: Value = serde_json::from_str(document)?;
    validate_catalog_value(&value)
}

/// [`validate_catalog`] over an already-parsed JSON value.
pub fn validate_catalog_value(value: &Value) -> Result<SpecializationCatalog, CatalogError> {
    let violations = schema::validate(catalog_schema(), value);
    if !violations.is_empty() {
        return Err(CatalogError::Schema(violations));
    }
    let mut catalog: SpecializationCatalog = serde_json::from_value(value.clone())?;
    catalog.normalize_flags();
    catalog.check_single_defaults()?;
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG5A: &str = include_str!("../tests/fixtures/fig5a_catalog.json");

    #[test]
    fn gromacs_snippet_validates() {
        let catalog = validate_catalog(FIG5A).unwrap();
        let cuda = &catalog.gpu_backends["CUDA"];
        assert_eq!(cuda.minimum_version.as_deref(), Some("12.1"));
        assert_eq!(cuda.build_flag.as_deref(), Some("-DGMX_GPU=CUDA"));
        let hip = &catalog.gpu_backends["HIP"];
        assert_eq!(hip.minimum_version.as_deref(), Some("5.4.3"));
        assert_eq!(catalog.simd_vectorization.len(), 5);
        assert_eq!(
            catalog.simd_vectorization["AVX_512"].build_flag.as_deref(),
            Some("-DGMX_SIMD=AVX_512")
        );
        assert_eq!(catalog.build_system.kind, BuildSystemKind::Cmake);
    }

    #[test]
    fn missing_build_system_is_schema_violation() {
        let mut value: Value = serde_json::from_str(FIG5A).unwrap();
        value.as_object_mut().unwrap().remove("build_system");
        let err = validate_catalog(&value.to_string()).unwrap_err();
        match err {
            CatalogError::Schema(violations) => {
                assert_eq!(violations.len(), 1);
                assert_eq!(violations[0].path, "/build_system");
                assert_eq!(violations[0].reason, "required key absent");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_rejected_per_required_key() {
        let err = validate_catalog("{}").unwrap_err();
        match err {
            CatalogError::Schema(violations) => assert_eq!(violations.len(), 13),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn extra_top_level_key_rejected() {
        let mut value: Value = serde_json::from_str(FIG5A).unwrap();
        value["surprise"] = Value::Bool(true);
        assert!(matches!(
            validate_catalog(&value.to_string()),
            Err(CatalogError::Schema(_))
        ));
    }

    #[test]
    fn flags_normalized_on_ingest() {
        let mut value: Value = serde_json::from_str(FIG5A).unwrap();
        value["gpu_backends"]["CUDA"]["build_flag"] = Value::String("GMX-GPU=CUDA".into());
        let catalog = validate_catalog(&value.to_string()).unwrap();
        assert_eq!(
            catalog.gpu_backends["CUDA"].build_flag.as_deref(),
            Some("-DGMX_GPU=CUDA")
        );
    }

    #[test]
    fn explicit_null_folds_to_absent_for_optional_fields() {
        let mut value: Value = serde_json::from_str(FIG5A).unwrap();
        value["FFT_libraries"]["fftw3"]["dependencies"] = Value::Null;
        let catalog = validate_catalog(&value.to_string()).unwrap();
        assert!(catalog.fft_libraries["fftw3"].dependencies.is_none());
        let reserialized: Value = serde_json::from_str(&catalog.to_document()).unwrap();
        assert!(reserialized["FFT_libraries"]["fftw3"]
            .as_object()
            .unwrap()
            .get("dependencies")
            .is_none());
    }

    #[test]
    fn multiple_defaults_rejected() {
        let mut value: Value = serde_json::from_str(FIG5A).unwrap();
        value["simd_vectorization"]["AVX_512"]["default"] = Value::Bool(true);
        value["simd_vectorization"]["AVX2_256"]["default"] = Value::Bool(true);
        assert!(matches!(
            validate_catalog(&value.to_string()),
            Err(CatalogError::MultipleDefaults { .. })
        ));
    }

    #[test]
    fn round_trip_is_fixed_point_after_one_pass() {
        let catalog = validate_catalog(FIG5A).unwrap();
        let serialized = catalog.to_document();
        let reparsed = validate_catalog(&serialized).unwrap();
        assert_eq!(catalog, reparsed);
        assert_eq!(serialized, reparsed.to_document());
    }

    #[test]
    fn undeclared_nested_members_preserved() {
        let mut value: Value = serde_json::from_str(FIG5A).unwrap();
        value["gpu_backends"]["CUDA"]["note"] = Value::String("extra".into());
        let catalog = validate_catalog(&value.to_string()).unwrap();
        assert_eq!(
            catalog.gpu_backends["CUDA"].extra.get("note"),
            Some(&Value::String("extra".into()))
        );
        let round: Value = serde_json::from_str(&catalog.to_document()).unwrap();
        assert_eq!(round["gpu_backends"]["CUDA"]["note"], "extra");
    }
}
