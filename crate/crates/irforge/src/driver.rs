//! Toolchain drivers.
//!
//! Everything that touches a compiler goes through a [`ToolchainDriver`]:
//! preprocessing for the dedup hash, IR emission, lowering IR to objects,
//! and one-shot compilation. Three drivers exist:
//!
//! - `builtin`: a hermetic text-level toolchain built on the internal
//!   preprocessor. Its "IR" is a framed preprocessed unit; useful for tests
//!   and toolchain-free hosts.
//! - `clang`: LLVM-based driver. IR is textual LLVM assembly emitted before
//!   the optimization pipeline with CPU/feature attributes stripped, so one
//!   artifact lowers to any ISA the deployment selects.
//! - `custom`: command templates with `{flags}`, `{input}`, `{output}`
//!   slots, loaded from a TOML spec.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use serde::Deserialize;
use thiserror::Error;

use crate::buildscan::Language;
use crate::preprocess::{preprocess_file, PreprocessOptions};
use crate::tables::is_openmp_flag;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("driver failure on {target}: {stderr}")]
    Failure { target: String, stderr: String },
    #[error("driver spec: {0}")]
    Spec(String),
    #[error("template slot left unsubstituted: {0}")]
    TemplateSlot(String),
    #[error("language {0:?} unsupported by this driver")]
    Unsupported(Language),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parsed driver specification (`--driver builtin|clang|<file.toml>`).
#[derive(Debug, Clone)]
pub enum DriverSpec {
    Builtin,
    Clang { cc: String, cxx: String },
    Custom(CustomSpec),
}

#[derive(Debug, Clone, Deserialize)]
pub struct CustomSpec {
    #[serde(default)]
    pub preprocess: Option<Vec<String>>,
    #[serde(default)]
    pub emit_ir: Option<Vec<String>>,
    #[serde(default)]
    pub lower: Option<Vec<String>>,
    #[serde(default)]
    pub compile: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct SpecFile {
    kind: String,
    #[serde(default)]
    cc: Option<String>,
    #[serde(default)]
    cxx: Option<String>,
    #[serde(default)]
    templates: Option<CustomSpec>,
}

impl DriverSpec {
    /// Parse a CLI driver spec: the literals `builtin` and `clang`, or a
    /// path to a TOML spec file.
    pub fn parse(spec: &str) -> Result<Self, DriverError> {
        match spec {
            "builtin" => Ok(DriverSpec::Builtin),
            "clang" => Ok(DriverSpec::Clang { cc: "clang".into(), cxx: "clang++".into() }),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    DriverError::Spec(format!("cannot read driver spec {path}: {e}"))
                })?;
                let file: SpecFile = toml::from_str(&text)
                    .map_err(|e| DriverError::Spec(format!("bad driver spec {path}: {e}")))?;
                match file.kind.as_str() {
                    "builtin" => Ok(DriverSpec::Builtin),
                    "clang" => Ok(DriverSpec::Clang {
                        cc: file.cc.unwrap_or_else(|| "clang".into()),
                        cxx: file.cxx.unwrap_or_else(|| "clang++".into()),
                    }),
                    "custom" => Ok(DriverSpec::Custom(file.templates.ok_or_else(|| {
                        DriverError::Spec("custom driver spec without [templates]".into())
                    })?)),
                    other => Err(DriverError::Spec(format!("unknown driver kind {other}"))),
                }
            }
        }
    }
}

pub struct ToolchainDriver {
    spec: DriverSpec,
}

/// True when a usable clang is on PATH; gates toolchain-dependent tests.
pub fn clang_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        Command::new("clang")
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    })
}

const BUILTIN_IR_HEADER: &str = ";; irforge-builtin-ir v1";
const BUILTIN_OBJ_HEADER: &str = ";; irforge-builtin-obj v1";

fn run_captured(mut cmd: Command, target: &str) -> Result<Vec<u8>, DriverError> {
    let output = cmd.output().map_err(|e| DriverError::Failure {
        target: target.to_string(),
        stderr: format!("failed to spawn {:?}: {e}", cmd.get_program()),
    })?;
    if !output.status.success() {
        return Err(DriverError::Failure {
            target: target.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).to_string(),
        });
    }
    Ok(output.stdout)
}

/// Remove per-function CPU selection attributes from textual LLVM IR so the
/// stored artifact is architecture-neutral and deploy-time `-m` flags take
/// effect at lowering.
fn strip_target_attributes(ir: &str) -> String {
    let mut out = String::with_capacity(ir.len());
    for line in ir.lines() {
        if line.starts_with("attributes #") {
            let mut cleaned = line.to_string();
            for key in ["target-cpu", "target-features", "tune-cpu"] {
                cleaned = remove_quoted_attribute(&cleaned, key);
            }
            out.push_str(&cleaned);
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

fn remove_quoted_attribute(line: &str, key: &str) -> String {
    let needle = format!("\"{key}\"=\"");
    let Some(start) = line.find(&needle) else {
        return line.to_string();
    };
    let value_start = start + needle.len();
    let Some(rel_end) = line[value_start..].find('"') else {
        return line.to_string();
    };
    let mut end = value_start + rel_end + 1;
    if line[end..].starts_with(' ') {
        end += 1;
    }
    format!("{}{}", &line[..start], &line[end..])
}

impl ToolchainDriver {
    pub fn new(spec: DriverSpec) -> Self {
        ToolchainDriver { spec }
    }

    pub fn from_spec_str(spec: &str) -> Result<Self, DriverError> {
        Ok(ToolchainDriver::new(DriverSpec::parse(spec)?))
    }

    pub fn is_builtin(&self) -> bool {
        matches!(self.spec, DriverSpec::Builtin)
    }

    fn compiler_for(&self, language: Language) -> &str {
        match &self.spec {
            DriverSpec::Clang { cc, cxx } => match language {
                Language::C => cc,
                _ => cxx,
            },
            _ => "",
        }
    }

    /// Can this driver preprocess sources of the given language?
    pub fn can_preprocess(&self, language: Language) -> bool {
        match &self.spec {
            DriverSpec::Builtin => {
                matches!(language, Language::C | Language::Cpp | Language::Cuda)
            }
            DriverSpec::Clang { .. } => matches!(language, Language::C | Language::Cpp),
            DriverSpec::Custom(spec) => {
                spec.preprocess.is_some() && !matches!(language, Language::Other)
            }
        }
    }

    /// Can this driver emit a reusable IR for the given language?
    pub fn can_emit_ir(&self, language: Language) -> bool {
        match &self.spec {
            DriverSpec::Builtin => {
                matches!(language, Language::C | Language::Cpp | Language::Cuda)
            }
            DriverSpec::Clang { .. } => matches!(language, Language::C | Language::Cpp),
            DriverSpec::Custom(spec) => {
                spec.emit_ir.is_some() && !matches!(language, Language::Other)
            }
        }
    }

    /// Preprocess a source file under the given flags (real paths, not
    /// placeholder form). Returns the preprocessed text with line markers.
    pub fn preprocess(
        &self,
        source: &Path,
        flags: &[String],
        language: Language,
    ) -> Result<String, DriverError> {
        if !self.can_preprocess(language) {
            return Err(DriverError::Unsupported(language));
        }
        match &self.spec {
            DriverSpec::Builtin => {
                let mut opts = PreprocessOptions::from_flags(flags.iter().map(String::as_str));
                if flags.iter().any(|f| is_openmp_flag(f)) {
                    opts.defines.insert(0, ("_OPENMP".into(), Some("201811".into())));
                }
                preprocess_file(source, &opts).map_err(|e| DriverError::Failure {
                    target: source.display().to_string(),
                    stderr: e.to_string(),
                })
            }
            DriverSpec::Clang { .. } => {
                let mut cmd = Command::new(self.compiler_for(language));
                cmd.args(flags.iter().filter(|f| f.as_str() != "-c"));
                cmd.arg("-E").arg(source);
                let bytes = run_captured(cmd, &source.display().to_string())?;
                Ok(String::from_utf8_lossy(&bytes).to_string())
            }
            DriverSpec::Custom(spec) => {
                let template = spec.preprocess.as_ref().unwrap();
                let out = tempfile::Builder::new().suffix(".i").tempfile()?;
                self.run_template(template, flags, source, out.path())?;
                Ok(std::fs::read_to_string(out.path())?)
            }
        }
    }

    /// Emit IR for one translation unit. `flags` are the emission flags
    /// (residual set, real paths). The result is the artifact byte content.
    pub fn emit_ir(
        &self,
        source: &Path,
        flags: &[String],
        language: Language,
        build_root: &str,
    ) -> Result<Vec<u8>, DriverError> {
        if !self.can_emit_ir(language) {
            return Err(DriverError::Unsupported(language));
        }
        match &self.spec {
            DriverSpec::Builtin => {
                let text = self.preprocess(source, flags, language)?;
                let normalized = crate::dedup::normalize_line_markers(&text, build_root);
                let mut framed = String::new();
                framed.push_str(BUILTIN_IR_HEADER);
                framed.push('\n');
                framed.push_str(&format!(";; language: {:?}\n", language));
                framed.push_str(&format!(";; flags: {}\n", flags.join(" ")));
                framed.push_str(&normalized);
                Ok(framed.into_bytes())
            }
            DriverSpec::Clang { .. } => {
                let out = tempfile::Builder::new().suffix(".ll").tempfile()?;
                let mut cmd = Command::new(self.compiler_for(language));
                cmd.args(flags.iter().filter(|f| f.as_str() != "-c"));
                cmd.args(["-S", "-emit-llvm", "-Xclang", "-disable-llvm-passes"]);
                cmd.arg(source).arg("-o").arg(out.path());
                run_captured(cmd, &source.display().to_string())?;
                let ir = std::fs::read_to_string(out.path())?;
                Ok(strip_target_attributes(&ir).into_bytes())
            }
            DriverSpec::Custom(spec) => {
                let template = spec.emit_ir.as_ref().unwrap();
                let out = tempfile::Builder::new().suffix(".ir").tempfile()?;
                self.run_template(template, flags, source, out.path())?;
                Ok(std::fs::read(out.path())?)
            }
        }
    }

    /// Lower stored IR bytes to an object file at `output`, applying the
    /// given flags (residual plus resolved architecture profile).
    pub fn lower(
        &self,
        ir: &[u8],
        flags: &[String],
        language: Language,
        output: &Path,
    ) -> Result<(), DriverError> {
        match &self.spec {
            DriverSpec::Builtin => {
                let mut framed = String::new();
                framed.push_str(BUILTIN_OBJ_HEADER);
                framed.push('\n');
                framed.push_str(&format!(";; flags: {}\n", flags.join(" ")));
                framed.push_str(&String::from_utf8_lossy(ir));
                std::fs::write(output, framed)?;
                Ok(())
            }
            DriverSpec::Clang { .. } => {
                let mut ir_file = tempfile::Builder::new().suffix(".ll").tempfile()?;
                ir_file.write_all(ir)?;
                ir_file.flush()?;
                let mut cmd = Command::new(self.compiler_for(language));
                cmd.args(flags);
                if !flags.iter().any(|f| f == "-c") {
                    cmd.arg("-c");
                }
                cmd.arg(ir_file.path()).arg("-o").arg(output);
                run_captured(cmd, &output.display().to_string())?;
                Ok(())
            }
            DriverSpec::Custom(spec) => {
                let template = spec
                    .lower
                    .as_ref()
                    .ok_or_else(|| DriverError::Spec("driver lacks lower template".into()))?;
                let mut ir_file = tempfile::Builder::new().suffix(".ir").tempfile()?;
                ir_file.write_all(ir)?;
                ir_file.flush()?;
                self.run_template(template, flags, ir_file.path(), output)?;
                Ok(())
            }
        }
    }

    /// One-shot compilation of a source file to an object, under the full
    /// original flag set. Used for system-dependent targets and by the
    /// equivalence oracles.
    pub fn compile_object(
        &self,
        source: &Path,
        flags: &[String],
        language: Language,
        output: &Path,
    ) -> Result<(), DriverError> {
        match &self.spec {
            DriverSpec::Builtin => {
                let text = self.preprocess(source, flags, language)?;
                let mut framed = String::new();
                framed.push_str(BUILTIN_OBJ_HEADER);
                framed.push('\n');
                framed.push_str(&format!(";; flags: {}\n", flags.join(" ")));
                framed.push_str(&text);
                std::fs::write(output, framed)?;
                Ok(())
            }
            DriverSpec::Clang { .. } => {
                let mut cmd = Command::new(self.compiler_for(language));
                cmd.args(flags);
                if !flags.iter().any(|f| f == "-c") {
                    cmd.arg("-c");
                }
                cmd.arg(source).arg("-o").arg(output);
                run_captured(cmd, &output.display().to_string())?;
                Ok(())
            }
            DriverSpec::Custom(spec) => {
                let template = spec
                    .compile
                    .as_ref()
                    .ok_or_else(|| DriverError::Spec("driver lacks compile template".into()))?;
                self.run_template(template, flags, source, output)?;
                Ok(())
            }
        }
    }

    fn run_template(
        &self,
        template: &[String],
        flags: &[String],
        input: &Path,
        output: &Path,
    ) -> Result<(), DriverError> {
        let mut argv: Vec<String> = Vec::new();
        for part in template {
            match part.as_str() {
                "{flags}" => argv.extend(flags.iter().cloned()),
                other => {
                    let substituted = other
                        .replace("{input}", &input.display().to_string())
                        .replace("{output}", &output.display().to_string());
                    if substituted.contains('{') && substituted.contains('}') {
                        return Err(DriverError::TemplateSlot(substituted));
                    }
                    argv.push(substituted);
                }
            }
        }
        if argv.is_empty() {
            return Err(DriverError::Spec("empty driver template".into()));
        }
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..]);
        run_captured(cmd, &input.display().to_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn builtin_defines_openmp_macro_only_with_flag() {
        let dir = tempfile::tempdir().unwrap();
        let src = write(
            dir.path(),
            "a.c",
            "#ifdef _OPENMP\nint with_omp;\n#else\nint without;\n#endif\n",
        );
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let with = driver
            .preprocess(&src, &["-fopenmp".into()], Language::C)
            .unwrap();
        assert!(with.contains("with_omp"));
        let without = driver.preprocess(&src, &[], Language::C).unwrap();
        assert!(without.contains("int without;"));
    }

    #[test]
    fn builtin_ir_is_deterministic_and_framed() {
        let dir = tempfile::tempdir().unwrap();
        let src = write(dir.path(), "a.c", "int f(void) { return 1; }\n");
        let driver = ToolchainDriver::new(DriverSpec::Builtin);
        let flags = vec!["-O2".to_string()];
        let a = driver
            .emit_ir(&src, &flags, Language::C, &dir.path().display().to_string())
            .unwrap();
        let b = driver
            .emit_ir(&src, &flags, Language::C, &dir.path().display().to_string())
            .unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8_lossy(&a).starts_with(BUILTIN_IR_HEADER));
    }

    #[test]
    fn spec_parsing() {
        assert!(matches!(DriverSpec::parse("builtin"), Ok(DriverSpec::Builtin)));
        assert!(matches!(DriverSpec::parse("clang"), Ok(DriverSpec::Clang { .. })));
        assert!(DriverSpec::parse("/nonexistent/driver.toml").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("driver.toml");
        std::fs::write(&path, "kind = \"clang\"\ncc = \"clang-14\"\ncxx = \"clang++-14\"\n").unwrap();
        match DriverSpec::parse(path.to_str().unwrap()).unwrap() {
            DriverSpec::Clang { cc, cxx } => {
                assert_eq!(cc, "clang-14");
                assert_eq!(cxx, "clang++-14");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attribute_stripping() {
        let ir = "define i32 @f() #0 {\n}\nattributes #0 = { noinline \"frame-pointer\"=\"all\" \"target-cpu\"=\"x86-64\" \"target-features\"=\"+cx8,+mmx\" \"tune-cpu\"=\"generic\" }\n";
        let stripped = strip_target_attributes(ir);
        assert!(!stripped.contains("target-cpu"));
        assert!(!stripped.contains("target-features"));
        assert!(!stripped.contains("tune-cpu"));
        assert!(stripped.contains("\"frame-pointer\"=\"all\""));
        assert!(stripped.contains("noinline"));
    }

    #[test]
    fn capability_queries() {
        let builtin = ToolchainDriver::new(DriverSpec::Builtin);
        assert!(builtin.can_emit_ir(Language::Cpp));
        assert!(builtin.can_emit_ir(Language::Cuda));
        assert!(!builtin.can_emit_ir(Language::Other));
        let clang = ToolchainDriver::new(DriverSpec::Clang { cc: "clang".into(), cxx: "clang++".into() });
        assert!(clang.can_emit_ir(Language::C));
        assert!(!clang.can_emit_ir(Language::Cuda));
        assert!(!clang.can_emit_ir(Language::Other));
    }

    #[test]
    fn clang_roundtrip_lowering_matches_oneshot() {
        if !clang_available() {
            eprintln!("skipping: clang not available");
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let src = write(
            dir.path(),
            "kern.c",
            "double dot(const double *a, const double *b, int n) {\n  double s = 0.0;\n  for (int i = 0; i < n; i++) s += a[i] * b[i];\n  return s;\n}\n",
        );
        let driver = ToolchainDriver::new(DriverSpec::Clang { cc: "clang".into(), cxx: "clang++".into() });
        let residual = vec!["-O2".to_string(), "-c".to_string()];
        let arch = vec!["-march=skylake-avx512".to_string()];

        let ir = driver
            .emit_ir(&src, &residual, Language::C, &dir.path().display().to_string())
            .unwrap();

        let mut lower_flags = residual.clone();
        lower_flags.extend(arch.clone());
        let lowered = dir.path().join("lowered.o");
        driver.lower(&ir, &lower_flags, Language::C, &lowered).unwrap();

        let mut full = residual.clone();
        full.extend(arch);
        let oneshot = dir.path().join("oneshot.o");
        driver.compile_object(&src, &full, Language::C, &oneshot).unwrap();

        let a = std::fs::read(&lowered).unwrap();
        let b = std::fs::read(&oneshot).unwrap();
        assert_eq!(a, b, "lowered object differs from one-shot compilation");
    }

    #[test]
    fn clang_failure_reports_stderr() {
        if !clang_available() {
            eprintln!("skipping: clang not available");
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let src = write(dir.path(), "bad.c", "this is not C\n");
        let driver = ToolchainDriver::new(DriverSpec::Clang { cc: "clang".into(), cxx: "clang++".into() });
        match driver.emit_ir(&src, &[], Language::C, "/b") {
            Err(DriverError::Failure { stderr, .. }) => assert!(stderr.contains("error")),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
