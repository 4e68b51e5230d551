//! Canonical spelling of specialization build flags.
//!
//! Extracted flags arrive in many spellings: bare definition names
//! (`GMX_SIMD`), hyphenated keys (`-DGGML-CUDA`), or already-canonical
//! `-DKEY=VALUE` forms. Evaluation and intersection both compare flags, so
//! every ingest path funnels through [`normalize_flag`] first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlagError {
    #[error("invalid flag label: {0}")]
    InvalidLabel(String),
}

/// A build flag in canonical form.
///
/// Definition-style flags (`-DKEY=VALUE`) carry a parsed key/value; other
/// compiler options (`-fopenmp`, `-O3`) pass through verbatim since rewriting
/// them would change their meaning.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CanonicalFlag {
    Definition {
        /// Definition name, underscores only (no hyphens).
        key: String,
        /// Text after the first `=`, preserved verbatim (case included).
        value: Option<String>,
    },
    Verbatim { raw: String },
}

impl CanonicalFlag {
    /// The canonical textual spelling of this flag.
    pub fn raw(&self) -> String {
        match self {
            CanonicalFlag::Definition { key, value } => match value {
                Some(v) => format!("-D{key}={v}"),
                None => format!("-D{key}"),
            },
            CanonicalFlag::Verbatim { raw } => raw.clone(),
        }
    }

    pub fn key(&self) -> Option<&str> {
        match self {
            CanonicalFlag::Definition { key, .. } => Some(key),
            CanonicalFlag::Verbatim { .. } => None,
        }
    }
}

impl std::fmt::Display for CanonicalFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.raw())
    }
}

fn valid_key_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// True when `raw` names a definition without the `-D` prefix, e.g.
/// `GMX_SIMD` or `GGML-CUDA=ON`.
fn is_bare_definition(raw: &str) -> bool {
    let key = raw.split('=').next().unwrap_or("");
    let mut chars = key.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| valid_key_char(c) || c == '-')
}

/// Normalize one flag spelling into canonical form.
///
/// Definition-style labels gain a missing `-D` prefix, hyphens inside the
/// key become underscores, and any `=value` suffix is preserved verbatim.
/// Characters outside `[A-Za-z0-9_-]` in a definition key are rejected
/// rather than silently mapped, so extraction errors stay visible to the
/// evaluator. Non-definition options (leading dash, not `-D`) pass through
/// untouched. Idempotent: normalizing a canonical flag is a no-op.
pub fn normalize_flag(raw: &str) -> Result<CanonicalFlag, FlagError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(FlagError::InvalidLabel(raw.to_string()));
    }

    let body = if let Some(rest) = trimmed.strip_prefix("-D") {
        rest
    } else if is_bare_definition(trimmed) {
        trimmed
    } else if trimmed.starts_with('-') || trimmed.starts_with('/') {
        return Ok(CanonicalFlag::Verbatim {
            raw: trimmed.to_string(),
        });
    } else {
        return Err(FlagError::InvalidLabel(raw.to_string()));
    };

    let (key_part, value) = match body.split_once('=') {
        Some((k, v)) => (k, Some(v.to_string())),
        None => (body, None),
    };

    let key: String = key_part
        .chars()
        .map(|c| if c == '-' { '_' } else { c })
        .collect();
    if key.is_empty() || !key.chars().all(valid_key_char) {
        return Err(FlagError::InvalidLabel(raw.to_string()));
    }

    Ok(CanonicalFlag::Definition { key, value })
}

/// Normalize and return the canonical spelling in one step.
pub fn normalize_flag_str(raw: &str) -> Result<String, FlagError> {
    normalize_flag(raw).map(|f| f.raw())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bare_definition_gains_prefix() {
        let f = normalize_flag("GMX_SIMD").unwrap();
        assert_eq!(f.key(), Some("GMX_SIMD"));
        assert_eq!(f.raw(), "-DGMX_SIMD");
    }

    #[test]
    fn canonical_flag_unchanged() {
        let f = normalize_flag("-DGMX_GPU=CUDA").unwrap();
        assert_eq!(f.raw(), "-DGMX_GPU=CUDA");
        assert_eq!(f.key(), Some("GMX_GPU"));
    }

    #[test]
    fn hyphen_in_key_becomes_underscore() {
        let f = normalize_flag("-DGGML-CUDA").unwrap();
        assert_eq!(f.raw(), "-DGGML_CUDA");
        // double application is a fixed point
        let g = normalize_flag(&f.raw()).unwrap();
        assert_eq!(g, f);
    }

    #[test]
    fn value_case_preserved() {
        let f = normalize_flag("GMX_GPU=cuda").unwrap();
        assert_eq!(f.raw(), "-DGMX_GPU=cuda");
        let g = normalize_flag("GMX_GPU=CUDA").unwrap();
        assert_ne!(f, g);
    }

    #[test]
    fn mixed_case_keys_accepted() {
        // Kokkos-style flags mix cases inside the key.
        let f = normalize_flag("-DKokkos_ENABLE_OPENMP").unwrap();
        assert_eq!(f.raw(), "-DKokkos_ENABLE_OPENMP");
    }

    #[test]
    fn non_definition_options_pass_through() {
        let f = normalize_flag("-fopenmp").unwrap();
        assert_eq!(f, CanonicalFlag::Verbatim { raw: "-fopenmp".into() });
        assert_eq!(normalize_flag("-O3").unwrap().raw(), "-O3");
    }

    #[test]
    fn empty_and_garbage_rejected() {
        assert!(matches!(normalize_flag(""), Err(FlagError::InvalidLabel(_))));
        assert!(matches!(normalize_flag("   "), Err(FlagError::InvalidLabel(_))));
        assert!(normalize_flag("-DBAD KEY").is_err());
        assert!(normalize_flag("-D").is_err());
        assert!(normalize_flag("1LEADING_DIGIT").is_err());
    }

    proptest! {
        // Idempotence over a generated corpus of plausible flag spellings.
        #[test]
        fn normalize_is_idempotent(
            key in "[A-Za-z_][A-Za-z0-9_-]{0,20}",
            value in proptest::option::of("[A-Za-z0-9_.=-]{0,12}"),
            with_prefix in proptest::bool::ANY,
        ) {
            let mut raw = String::new();
            if with_prefix {
                raw.push_str("-D");
            }
            raw.push_str(&key);
            if let Some(v) = &value {
                raw.push('=');
                raw.push_str(v);
            }
            if let Ok(once) = normalize_flag(&raw) {
                let twice = normalize_flag(&once.raw()).unwrap();
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn verbatim_options_stable(raw in "-[a-zA-Z][a-zA-Z0-9=,./-]{0,16}") {
            prop_assume!(!raw.starts_with("-D"));
            let once = normalize_flag(&raw).unwrap();
            let twice = normalize_flag(&once.raw()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
