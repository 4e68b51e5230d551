//! Compile-command database ingestion.
//!
//! Every configured build produces a compile-command database (the JSON
//! array CMake emits, or an equivalent produced by a wrapper for other build
//! systems). This module loads those databases, extracts compilation targets
//! — (source, output) pairs, since one source can map to several targets
//! with different flags — and canonicalizes flag lists so targets from
//! different configurations become comparable: the driver token goes away,
//! source and output move into the target id, and every path under the build
//! root is rewritten to a placeholder.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Placeholder substituted for the configured build root inside flag tokens
/// and target ids. Builds mounted at different locations therefore
/// canonicalize to identical flag sets.
pub const BUILD_PLACEHOLDER: &str = "«BUILD»";

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("compile database is not a JSON array: {0}")]
    NotAnArray(serde_json::Error),
    #[error("entry {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("entry {index}: command and arguments disagree")]
    AmbiguousEntry { index: usize },
    #[error("duplicate target ({src}, {output}) with differing flags")]
    DuplicateTarget { src: String, output: String },
}

// --- Shell splitting --------------------------------------------------------

/// Split a shell command string into tokens, honoring POSIX quoting: single
/// quotes are literal, double quotes allow `\"` and `\\`, and a backslash
/// outside quotes escapes the next character. No expansions are performed.
pub fn shell_split(command: &str) -> Result<Vec<String>, String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_token = false;
    let mut chars = command.chars().peekable();

    while let Some(c) = chars.next() {
        match c {
            c if c.is_whitespace() => {
                if in_token {
                    tokens.push(std::mem::take(&mut current));
                    in_token = false;
                }
            }
            '\'' => {
                in_token = true;
                loop {
                    match chars.next() {
                        Some('\'') => break,
                        Some(c) => current.push(c),
                        None => return Err("no closing single quote".into()),
                    }
                }
            }
            '"' => {
                in_token = true;
                loop {
                    match chars.next() {
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(e @ ('"' | '\\')) => current.push(e),
                            Some(other) => {
                                current.push('\\');
                                current.push(other);
                            }
                            None => return Err("dangling escape in double quotes".into()),
                        },
                        Some(c) => current.push(c),
                        None => return Err("no closing double quote".into()),
                    }
                }
            }
            '\\' => {
                in_token = true;
                match chars.next() {
                    Some(e) => current.push(e),
                    None => return Err("dangling escape".into()),
                }
            }
            c => {
                in_token = true;
                current.push(c);
            }
        }
    }
    if in_token {
        tokens.push(current);
    }
    Ok(tokens)
}

// --- Compile commands -------------------------------------------------------

/// One entry of a compile-command database, with `command` strings already
/// split and response files expanded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileCommand {
    pub directory: PathBuf,
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub arguments: Vec<String>,
}

const MAX_RESPONSE_DEPTH: usize = 4;

fn expand_response_files(
    args: Vec<String>,
    directory: &Path,
    index: usize,
    depth: usize,
) -> Result<Vec<String>, ScanError> {
    let mut out = Vec::with_capacity(args.len());
    for arg in args {
        if let Some(path) = arg.strip_prefix('@') {
            if depth >= MAX_RESPONSE_DEPTH {
                return Err(ScanError::Malformed {
                    index,
                    reason: format!("response files nested deeper than {MAX_RESPONSE_DEPTH}"),
                });
            }
            let resolved = if Path::new(path).is_absolute() {
                PathBuf::from(path)
            } else {
                directory.join(path)
            };
            let content = std::fs::read_to_string(&resolved).map_err(|e| ScanError::Malformed {
                index,
                reason: format!("response file {}: {e}", resolved.display()),
            })?;
            let inner = shell_split(&content)
                .map_err(|reason| ScanError::Malformed { index, reason })?;
            out.extend(expand_response_files(inner, directory, index, depth + 1)?);
        } else {
            out.push(arg);
        }
    }
    Ok(out)
}

/// Load a compile-command database from a JSON string. Entries must carry
/// "directory", "file", and either "command" (shell string) or "arguments"
/// (array); when both are present they must agree after splitting.
pub fn parse_compile_db(text: &str) -> Result<Vec<CompileCommand>, ScanError> {
    let entries: Vec<Value> = serde_json::from_str(text).map_err(ScanError::NotAnArray)?;
    let mut commands = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let obj = entry.as_object().ok_or_else(|| ScanError::Malformed {
            index,
            reason: "entry is not an object".into(),
        })?;
        let get_str = |key: &str| -> Option<&str> { obj.get(key).and_then(Value::as_str) };
        let directory = get_str("directory").ok_or_else(|| ScanError::Malformed {
            index,
            reason: "directory absent".into(),
        })?;
        let file = get_str("file").ok_or_else(|| ScanError::Malformed {
            index,
            reason: "file absent".into(),
        })?;

        let from_arguments: Option<Vec<String>> = match obj.get("arguments") {
            Some(Value::Array(items)) => {
                let mut args = Vec::with_capacity(items.len());
                for item in items {
                    args.push(
                        item.as_str()
                            .ok_or_else(|| ScanError::Malformed {
                                index,
                                reason: "arguments items must be strings".into(),
                            })?
                            .to_string(),
                    );
                }
                Some(args)
            }
            Some(_) => {
                return Err(ScanError::Malformed {
                    index,
                    reason: "arguments must be an array".into(),
                })
            }
            None => None,
        };
        let from_command: Option<Vec<String>> = match obj.get("command") {
            Some(Value::String(cmd)) => {
                Some(shell_split(cmd).map_err(|reason| ScanError::Malformed { index, reason })?)
            }
            Some(_) => {
                return Err(ScanError::Malformed {
                    index,
                    reason: "command must be a string".into(),
                })
            }
            None => None,
        };

        let arguments = match (from_arguments, from_command) {
            (Some(a), Some(c)) => {
                if a != c {
                    return Err(ScanError::AmbiguousEntry { index });
                }
                a
            }
            (Some(a), None) => a,
            (None, Some(c)) => c,
            (None, None) => {
                return Err(ScanError::Malformed {
                    index,
                    reason: "neither command nor arguments present".into(),
                })
            }
        };
        if arguments.is_empty() {
            return Err(ScanError::Malformed {
                index,
                reason: "empty argument list".into(),
            });
        }

        let directory = PathBuf::from(directory);
        let arguments = expand_response_files(arguments, &directory, index, 0)?;
        let file = if Path::new(file).is_absolute() {
            PathBuf::from(file)
        } else {
            directory.join(file)
        };
        let output = get_str("output").map(|o| {
            if Path::new(o).is_absolute() {
                PathBuf::from(o)
            } else {
                directory.join(o)
            }
        });

        commands.push(CompileCommand {
            directory,
            file,
            output,
            arguments,
        });
    }
    Ok(commands)
}

/// Load a compile-command database from a file.
pub fn load_compile_db(path: &Path) -> Result<Vec<CompileCommand>, ScanError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScanError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_compile_db(&text)
}

// --- Targets and flag canonicalization ---------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    #[serde(rename = "c++")]
    Cpp,
    Cuda,
    Other,
}

fn language_of_extension(path: &Path) -> Language {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "c" => Language::C,
        "C" | "cc" | "cpp" | "cxx" | "c++" => Language::Cpp,
        "cu" => Language::Cuda,
        _ => Language::Other,
    }
}

fn language_from_x(value: &str) -> Language {
    match value {
        "c" | "c-header" => Language::C,
        "c++" | "c++-header" => Language::Cpp,
        "cu" | "cuda" => Language::Cuda,
        _ => Language::Other,
    }
}

const SOURCE_EXTENSIONS: &[&str] = &[
    "c", "C", "cc", "cpp", "cxx", "c++", "cu", "s", "S", "f", "f90", "F90",
];

fn looks_like_source(token: &str) -> bool {
    if token.starts_with('-') {
        return false;
    }
    Path::new(token)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| SOURCE_EXTENSIONS.contains(&e))
        .unwrap_or(false)
}

/// Ordered canonical flag tokens for one target; never contains the literal
/// build-root path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct FlagSet(pub Vec<String>);

impl FlagSet {
    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.iter().any(|t| t == token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rewrite `root` to the placeholder wherever it occurs at a path boundary
/// inside `token` (start of token or after `=` etc., followed by `/` or end).
pub fn apply_placeholder(token: &str, root: &str) -> String {
    replace_path_prefix(token, root, BUILD_PLACEHOLDER)
}

/// Inverse of [`apply_placeholder`].
pub fn substitute_placeholder(token: &str, root: &str) -> String {
    token.replace(BUILD_PLACEHOLDER, root)
}

fn replace_path_prefix(token: &str, from: &str, to: &str) -> String {
    let from = from.trim_end_matches('/');
    if from.is_empty() {
        return token.to_string();
    }
    let mut result = String::with_capacity(token.len());
    let mut rest = token;
    while let Some(pos) = rest.find(from) {
        let after = &rest[pos + from.len()..];
        let boundary = after.is_empty() || after.starts_with('/') || after.starts_with('"');
        result.push_str(&rest[..pos]);
        if boundary {
            result.push_str(to);
        } else {
            result.push_str(from);
        }
        rest = after;
    }
    result.push_str(rest);
    result
}

/// Compiler wrappers whose presence shifts the real driver one token right.
const DRIVER_WRAPPERS: &[&str] = &["ccache", "sccache", "distcc", "icecc"];

/// Canonicalize a raw argument vector: drop the driver token (and a wrapper
/// in front of it), remove the positional source and the `-o` pair, and
/// rewrite build-root paths to the placeholder. Everything else is preserved
/// in order.
pub fn canonicalize_flags(args: &[String], build_root: &Path) -> FlagSet {
    let root = build_root.to_string_lossy();
    let mut tokens = Vec::new();
    let mut i = 0;

    // driver token (plus wrapper)
    if i < args.len() {
        let base = Path::new(&args[i])
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        i += 1;
        if DRIVER_WRAPPERS.contains(&base.as_str()) && i < args.len() {
            i += 1;
        }
    }

    while i < args.len() {
        let arg = &args[i];
        if arg == "-o" {
            i += 2;
            continue;
        }
        if let Some(stripped) = arg.strip_prefix("-o") {
            if !stripped.is_empty() && !stripped.starts_with('-') {
                i += 1;
                continue;
            }
        }
        if looks_like_source(arg) {
            i += 1;
            continue;
        }
        tokens.push(apply_placeholder(arg, &root));
        i += 1;
    }

    FlagSet(tokens)
}

/// One compilation target: a (source, output) pair plus its canonical flags.
/// Paths under the build root are stored in placeholder form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilationTarget {
    pub source: String,
    pub output: String,
    pub language: Language,
    pub flags: FlagSet,
}

impl CompilationTarget {
    pub fn id(&self) -> (String, String) {
        (self.source.clone(), self.output.clone())
    }
}

/// Derive the output path for a command without `-o`: compiler-default
/// object naming next to the working directory.
fn default_output(cmd: &CompileCommand) -> PathBuf {
    let stem = cmd
        .file
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".into());
    cmd.directory.join(format!("{stem}.o"))
}

fn find_output(cmd: &CompileCommand) -> PathBuf {
    if let Some(out) = &cmd.output {
        return out.clone();
    }
    let mut iter = cmd.arguments.iter().peekable();
    while let Some(arg) = iter.next() {
        if arg == "-o" {
            if let Some(next) = iter.peek() {
                let p = Path::new(next.as_str());
                return if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    cmd.directory.join(p)
                };
            }
        } else if let Some(out) = arg.strip_prefix("-o") {
            if !out.is_empty() && !out.starts_with('-') {
                let p = Path::new(out);
                return if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    cmd.directory.join(p)
                };
            }
        }
    }
    default_output(cmd)
}

fn find_language(cmd: &CompileCommand) -> Language {
    let mut iter = cmd.arguments.iter().peekable();
    while let Some(arg) = iter.next() {
        if arg == "-x" {
            if let Some(next) = iter.peek() {
                return language_from_x(next);
            }
        } else if let Some(v) = arg.strip_prefix("-x") {
            if !v.is_empty() {
                return language_from_x(v);
            }
        }
    }
    language_of_extension(&cmd.file)
}

/// Extract one target per (source, output) pair. Byte-identical entries
/// collapse; identical pairs with differing flags are an error surfaced to
/// the user rather than silently merged.
pub fn extract_targets(
    db: &[CompileCommand],
    build_root: &Path,
) -> Result<Vec<CompilationTarget>, ScanError> {
    let root = build_root.to_string_lossy();
    let mut targets: Vec<CompilationTarget> = Vec::new();
    let mut seen: BTreeMap<(String, String), FlagSet> = BTreeMap::new();

    for cmd in db {
        let source = apply_placeholder(&cmd.file.to_string_lossy(), &root);
        let output = apply_placeholder(&find_output(cmd).to_string_lossy(), &root);
        let flags = canonicalize_flags(&cmd.arguments, build_root);
        let language = find_language(cmd);

        match seen.get(&(source.clone(), output.clone())) {
            Some(existing) if *existing == flags => continue, // exact duplicate
            Some(_) => {
                return Err(ScanError::DuplicateTarget { src: source, output });
            }
            None => {
                seen.insert((source.clone(), output.clone()), flags.clone());
                targets.push(CompilationTarget {
                    source,
                    output,
                    language,
                    flags,
                });
            }
        }
    }
    Ok(targets)
}

// --- Build configurations ----------------------------------------------------

/// One configured build: a name, the specialization-point assignment that
/// produced it, and its extracted targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfiguration {
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub assignments: BTreeMap<String, String>,
    pub targets: Vec<CompilationTarget>,
    pub t_count: usize,
}

impl BuildConfiguration {
    pub fn new(
        name: String,
        assignments: BTreeMap<String, String>,
        targets: Vec<CompilationTarget>,
    ) -> Self {
        let t_count = targets.len();
        BuildConfiguration {
            name,
            assignments,
            targets,
            t_count,
        }
    }
}

/// The scan product consumed by dedup: all configurations, canonicalized
/// against one build root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOutput {
    pub build_root: String,
    pub configurations: Vec<BuildConfiguration>,
}

impl ScanOutput {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("scan output serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Scan a set of named databases into one comparable snapshot.
pub fn scan(
    configs: &[(String, PathBuf)],
    build_root: &Path,
    assignments: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<ScanOutput, ScanError> {
    let mut configurations = Vec::with_capacity(configs.len());
    for (name, db_path) in configs {
        let db = load_compile_db(db_path)?;
        let targets = extract_targets(&db, build_root)?;
        let assignment = assignments.get(name).cloned().unwrap_or_default();
        configurations.push(BuildConfiguration::new(name.clone(), assignment, targets));
    }
    Ok(ScanOutput {
        build_root: build_root.to_string_lossy().to_string(),
        configurations,
    })
}
