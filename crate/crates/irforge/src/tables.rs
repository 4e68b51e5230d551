//! Flag-classification tables, shipped as editable data assets.

use std::sync::OnceLock;

use serde::Deserialize;

/// Architecture-flag patterns: which tokens select CPU targets, enable ISA
/// features, or tune codegen. Unknown `-m*` tokens count as architecture
/// flags; the oracle suite catches miscategorization as grouping mismatches.
#[derive(Debug, Clone, Deserialize)]
pub struct ArchFlagTable {
    pub prefixes: Vec<String>,
    pub feature_prefix: String,
    pub non_arch: Vec<String>,
    /// Flags that consume the following token as their argument.
    pub paired: Vec<String>,
}

pub const ARCH_FLAGS_TEXT: &str = include_str!("../assets/arch_flags.json");

impl ArchFlagTable {
    pub fn builtin() -> &'static ArchFlagTable {
        static TABLE: OnceLock<ArchFlagTable> = OnceLock::new();
        TABLE.get_or_init(|| serde_json::from_str(ARCH_FLAGS_TEXT).expect("arch table parses"))
    }

    /// True when the token is an architecture/codegen-selection flag.
    pub fn is_arch_flag(&self, token: &str) -> bool {
        if self.non_arch.iter().any(|t| t == token) {
            return false;
        }
        if self.prefixes.iter().any(|p| token.starts_with(p.as_str())) {
            return true;
        }
        token.starts_with(&self.feature_prefix)
            && token.len() > self.feature_prefix.len()
    }

    /// True when the token takes the following token as its argument.
    pub fn is_paired(&self, token: &str) -> bool {
        self.paired.iter().any(|t| t == token)
    }
}

pub const OPENMP_FLAGS_TEXT: &str = include_str!("../assets/openmp_flags.json");

/// Recognized OpenMP enable-flag spellings across the major drivers.
pub fn openmp_flags() -> &'static [String] {
    static FLAGS: OnceLock<Vec<String>> = OnceLock::new();
    FLAGS.get_or_init(|| serde_json::from_str(OPENMP_FLAGS_TEXT).expect("openmp flag list parses"))
}

/// True when the token enables OpenMP.
pub fn is_openmp_flag(token: &str) -> bool {
    openmp_flags().iter().any(|f| f == token)
}
