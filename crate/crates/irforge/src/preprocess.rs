//! A small, hermetic C/C++ preprocessor.
//!
//! The dedup pipeline needs preprocessed translation units to hash. When a
//! real toolchain is configured it does the job; this module is the builtin
//! fallback that keeps the pipeline (and its tests) independent of any
//! installed compiler. It implements the subset that drives configuration
//! divergence: object- and function-like macros, conditional inclusion with
//! a full `#if` expression evaluator, include resolution with `-I` search
//! order, comment stripping, line splicing, and GNU-style line markers.
//!
//! Out of scope: `#`/`##` operators, variadic macros, multi-line macro
//! invocations, and `__FILE__`-style dynamic macros.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("{file}:{line}: {message}")]
    Failed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
enum Macro {
    Object(String),
    Function { params: Vec<String>, body: String },
}

/// Preprocessing options mirroring the relevant driver flags.
#[derive(Debug, Clone, Default)]
pub struct PreprocessOptions {
    pub include_dirs: Vec<PathBuf>,
    /// `-D` definitions in command-line order (later wins).
    pub defines: Vec<(String, Option<String>)>,
    /// `-U` undefines, applied after the defines.
    pub undefines: Vec<String>,
}

impl PreprocessOptions {
    /// Build options from canonical flag tokens (placeholder already
    /// substituted). Unrecognized tokens are ignored; they do not affect
    /// preprocessing.
    pub fn from_flags<'a>(flags: impl Iterator<Item = &'a str>) -> Self {
        let mut opts = PreprocessOptions::default();
        let mut flags = flags.peekable();
        while let Some(flag) = flags.next() {
            if let Some(rest) = flag.strip_prefix("-D") {
                let spec = if rest.is_empty() {
                    flags.next().unwrap_or_default()
                } else {
                    rest
                };
                match spec.split_once('=') {
                    Some((k, v)) => opts.defines.push((k.to_string(), Some(v.to_string()))),
                    None => opts.defines.push((spec.to_string(), None)),
                }
            } else if let Some(rest) = flag.strip_prefix("-U") {
                let name = if rest.is_empty() {
                    flags.next().unwrap_or_default()
                } else {
                    rest
                };
                opts.undefines.push(name.to_string());
            } else if let Some(rest) = flag.strip_prefix("-I") {
                let dir = if rest.is_empty() {
                    flags.next().unwrap_or_default()
                } else {
                    rest
                };
                opts.include_dirs.push(PathBuf::from(dir));
            } else if flag == "-isystem" || flag == "-iquote" {
                if let Some(dir) = flags.next() {
                    opts.include_dirs.push(PathBuf::from(dir));
                }
            }
        }
        opts
    }
}

/// Preprocess one file to text with line markers.
pub fn preprocess_file(path: &Path, opts: &PreprocessOptions) -> Result<String, PreprocessError> {
    let mut state = State {
        macros: BTreeMap::new(),
        include_dirs: opts.include_dirs.clone(),
        pragma_once: HashSet::new(),
        out: String::new(),
        last_file: String::new(),
        next_line: 0,
        depth: 0,
    };
    for (name, value) in &opts.defines {
        state.macros.insert(
            name.clone(),
            Macro::Object(value.clone().unwrap_or_else(|| "1".to_string())),
        );
    }
    for name in &opts.undefines {
        state.macros.remove(name);
    }
    state.process_file(path)?;
    Ok(state.out)
}

struct State {
    macros: BTreeMap<String, Macro>,
    include_dirs: Vec<PathBuf>,
    pragma_once: HashSet<PathBuf>,
    out: String,
    last_file: String,
    /// Physical line number the next emitted text line must have for the
    /// current marker to remain accurate.
    next_line: usize,
    depth: usize,
}

struct CondFrame {
    /// This branch is emitting.
    active: bool,
    /// Some branch of this chain already matched.
    taken: bool,
    seen_else: bool,
}

const MAX_INCLUDE_DEPTH: usize = 64;

impl State {
    fn process_file(&mut self, path: &Path) -> Result<(), PreprocessError> {
        if self.depth >= MAX_INCLUDE_DEPTH {
            return Err(PreprocessError::Failed {
                file: path.display().to_string(),
                line: 0,
                message: "include depth exceeded".to_string(),
            });
        }
        let canonical = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        if self.pragma_once.contains(&canonical) {
            return Ok(());
        }
        let text = std::fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.to_path_buf(),
            source,
        })?;

        self.depth += 1;
        let file_name = path.display().to_string();
        let result = self.process_text(&text, &file_name, path, &canonical);
        self.depth -= 1;
        result
    }

    fn err(&self, file: &str, line: usize, message: impl Into<String>) -> PreprocessError {
        PreprocessError::Failed {
            file: file.to_string(),
            line,
            message: message.into(),
        }
    }

    fn emit_marker(&mut self, file: &str, line: usize) {
        self.out.push_str(&format!("# {line} \"{file}\"\n"));
        self.last_file = file.to_string();
        self.next_line = line;
    }

    fn emit_line(&mut self, file: &str, line: usize, text: &str) {
        if self.last_file != file || self.next_line != line {
            self.emit_marker(file, line);
        }
        self.out.push_str(text);
        self.out.push('\n');
        self.next_line = line + 1;
    }

    fn process_text(
        &mut self,
        text: &str,
        file_name: &str,
        path: &Path,
        canonical: &Path,
    ) -> Result<(), PreprocessError> {
        self.emit_marker(file_name, 1);

        let raw_lines: Vec<&str> = text.split('\n').collect();
        let mut conditionals: Vec<CondFrame> = Vec::new();
        let mut in_block_comment = false;
        let mut i = 0;

        while i < raw_lines.len() {
            let line_no = i + 1;
            // line splicing
            let mut logical = raw_lines[i].trim_end_matches('\r').to_string();
            while logical.ends_with('\\') && i + 1 < raw_lines.len() {
                logical.pop();
                i += 1;
                logical.push_str(raw_lines[i].trim_end_matches('\r'));
            }
            i += 1;

            let stripped = strip_comments(&logical, &mut in_block_comment);
            let active = conditionals.iter().all(|f| f.active);
            let trimmed = stripped.trim_start();

            if let Some(directive) = trimmed.strip_prefix('#') {
                let directive = directive.trim_start();
                let (name, rest) = split_directive(directive);
                match name {
                    "ifdef" | "ifndef" => {
                        let symbol = rest.trim();
                        let defined = self.macros.contains_key(symbol);
                        let cond = if name == "ifdef" { defined } else { !defined };
                        conditionals.push(CondFrame {
                            active: active && cond,
                            taken: cond,
                            seen_else: false,
                        });
                    }
                    "if" => {
                        let value = if active {
                            self.eval_condition(rest, file_name, line_no)?
                        } else {
                            false
                        };
                        conditionals.push(CondFrame {
                            active: active && value,
                            taken: value,
                            seen_else: false,
                        });
                    }
                    "elif" => {
                        let frame = conditionals.last_mut().ok_or_else(|| {
                            self.err(file_name, line_no, "#elif without #if")
                        })?;
                        if frame.seen_else {
                            return Err(self.err(file_name, line_no, "#elif after #else"));
                        }
                        let parent_active = conditionals[..conditionals.len() - 1]
                            .iter()
                            .all(|f| f.active);
                        let frame = conditionals.last_mut().unwrap();
                        if frame.taken || !parent_active {
                            frame.active = false;
                        } else {
                            frame.active = false;
                            let taken_snapshot = frame.taken;
                            // evaluate only when no earlier branch matched
                            if !taken_snapshot {
                                let value = self.eval_condition(rest, file_name, line_no)?;
                                let frame = conditionals.last_mut().unwrap();
                                frame.active = value;
                                frame.taken = value;
                            }
                        }
                    }
                    "else" => {
                        let parent_active = conditionals[..conditionals.len().saturating_sub(1)]
                            .iter()
                            .all(|f| f.active);
                        let frame = conditionals.last_mut().ok_or_else(|| {
                            self.err(file_name, line_no, "#else without #if")
                        })?;
                        if frame.seen_else {
                            return Err(self.err(file_name, line_no, "duplicate #else"));
                        }
                        frame.seen_else = true;
                        frame.active = parent_active && !frame.taken;
                        frame.taken = true;
                    }
                    "endif" => {
                        conditionals
                            .pop()
                            .ok_or_else(|| self.err(file_name, line_no, "#endif without #if"))?;
                    }
                    "define" if active => self.handle_define(rest, file_name, line_no)?,
                    "undef" if active => {
                        self.macros.remove(rest.trim());
                    }
                    "include" if active => {
                        let resolved = self.resolve_include(rest.trim(), path, file_name, line_no)?;
                        self.process_file(&resolved)?;
                    }
                    "pragma" if active => {
                        if rest.trim() == "once" {
                            self.pragma_once.insert(canonical.to_path_buf());
                        } else {
                            // pragmas survive preprocessing verbatim
                            self.emit_line(file_name, line_no, &stripped);
                        }
                    }
                    "error" if active => {
                        return Err(self.err(file_name, line_no, format!("#error {}", rest.trim())));
                    }
                    "line" | "warning" if active => {
                        // passed through untouched
                        self.emit_line(file_name, line_no, &stripped);
                    }
                    _ => {} // inactive or unknown directive
                }
            } else if active {
                if stripped.trim().is_empty() {
                    // blank lines collapse; line tracking re-syncs via markers
                    continue;
                }
                let expanded = self.expand(&stripped, &mut HashSet::new());
                self.emit_line(file_name, line_no, &expanded);
            }
        }

        if !conditionals.is_empty() {
            return Err(self.err(file_name, raw_lines.len(), "unterminated #if"));
        }
        Ok(())
    }

    fn handle_define(
        &mut self,
        rest: &str,
        file: &str,
        line: usize,
    ) -> Result<(), PreprocessError> {
        let rest = rest.trim_start();
        let name_end = rest
            .find(|c: char| !c.is_ascii_alphanumeric() && c != '_')
            .unwrap_or(rest.len());
        let name = &rest[..name_end];
        if name.is_empty() {
            return Err(self.err(file, line, "#define without a name"));
        }
        let after = &rest[name_end..];
        if let Some(params_start) = after.strip_prefix('(') {
            let close = params_start
                .find(')')
                .ok_or_else(|| self.err(file, line, "unterminated macro parameter list"))?;
            let params: Vec<String> = params_start[..close]
                .split(',')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect();
            let body = params_start[close + 1..].trim().to_string();
            self.macros
                .insert(name.to_string(), Macro::Function { params, body });
        } else {
            self.macros
                .insert(name.to_string(), Macro::Object(after.trim().to_string()));
        }
        Ok(())
    }

    fn resolve_include(
        &self,
        spec: &str,
        current: &Path,
        file: &str,
        line: usize,
    ) -> Result<PathBuf, PreprocessError> {
        let (name, quoted) = if let Some(inner) = spec.strip_prefix('"') {
            let end = inner
                .find('"')
                .ok_or_else(|| self.err(file, line, "unterminated include"))?;
            (&inner[..end], true)
        } else if let Some(inner) = spec.strip_prefix('<') {
            let end = inner
                .find('>')
                .ok_or_else(|| self.err(file, line, "unterminated include"))?;
            (&inner[..end], false)
        } else {
            return Err(self.err(file, line, format!("malformed include: {spec}")));
        };

        let mut candidates = Vec::new();
        if quoted {
            if let Some(parent) = current.parent() {
                candidates.push(parent.join(name));
            }
        }
        for dir in &self.include_dirs {
            candidates.push(dir.join(name));
        }
        candidates
            .into_iter()
            .find(|c| c.is_file())
            .ok_or_else(|| self.err(file, line, format!("include not found: {name}")))
    }

    // --- macro expansion -----------------------------------------------

    fn expand(&self, text: &str, painting: &mut HashSet<String>) -> String {
        let mut out = String::with_capacity(text.len());
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '"' || c == '\'' {
                // copy string/char literal verbatim
                out.push(c);
                i += 1;
                while i < chars.len() {
                    out.push(chars[i]);
                    if chars[i] == '\\' && i + 1 < chars.len() {
                        out.push(chars[i + 1]);
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
                if painting.contains(&ident) {
                    out.push_str(&ident);
                    continue;
                }
                match self.macros.get(&ident) {
                    Some(Macro::Object(body)) => {
                        painting.insert(ident.clone());
                        out.push_str(&self.expand(body, painting));
                        painting.remove(&ident);
                    }
                    Some(Macro::Function { params, body }) => {
                        // peek for an argument list
                        let mut j = i;
                        while j < chars.len() && chars[j].is_whitespace() {
                            j += 1;
                        }
                        if j < chars.len() && chars[j] == '(' {
                            if let Some((args, after)) = parse_macro_args(&chars, j) {
                                let expanded_args: Vec<String> = args
                                    .iter()
                                    .map(|a| self.expand(a.trim(), painting))
                                    .collect();
                                let substituted =
                                    substitute_params(body, params, &expanded_args);
                                painting.insert(ident.clone());
                                out.push_str(&self.expand(&substituted, painting));
                                painting.remove(&ident);
                                i = after;
                                continue;
                            }
                        }
                        out.push_str(&ident);
                    }
                    None => out.push_str(&ident),
                }
                continue;
            }
            out.push(c);
            i += 1;
        }
        out
    }

    // --- #if expressions -------------------------------------------------

    fn eval_condition(
        &self,
        expr: &str,
        file: &str,
        line: usize,
    ) -> Result<bool, PreprocessError> {
        // resolve defined(...) before macro expansion
        let resolved = self.resolve_defined(expr);
        let expanded = self.expand(&resolved, &mut HashSet::new());
        // surviving identifiers evaluate to 0
        let mut parser = ExprParser::new(&expanded);
        let value = parser
            .parse_expr(0)
            .map_err(|m| self.err(file, line, format!("bad #if expression: {m} in `{expanded}`")))?;
        parser.skip_ws();
        if !parser.at_end() {
            return Err(self.err(
                file,
                line,
                format!("trailing tokens in #if expression `{expanded}`"),
            ));
        }
        Ok(value != 0)
    }

    fn resolve_defined(&self, expr: &str) -> String {
        let mut out = String::new();
        let chars: Vec<char> = expr.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_ascii_alphabetic() || chars[i] == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let ident: String = chars[start..i].iter().collect();
                if ident == "defined" {
                    let mut j = i;
                    while j < chars.len() && chars[j].is_whitespace() {
                        j += 1;
                    }
                    let (name, end) = if j < chars.len() && chars[j] == '(' {
                        let mut k = j + 1;
                        while k < chars.len() && chars[k].is_whitespace() {
                            k += 1;
                        }
                        let ns = k;
                        while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_')
                        {
                            k += 1;
                        }
                        let name: String = chars[ns..k].iter().collect();
                        while k < chars.len() && chars[k].is_whitespace() {
                            k += 1;
                        }
                        if k < chars.len() && chars[k] == ')' {
                            (name, k + 1)
                        } else {
                            (name, k)
                        }
                    } else {
                        let ns = j;
                        let mut k = j;
                        while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_')
                        {
                            k += 1;
                        }
                        (chars[ns..k].iter().collect(), k)
                    };
                    out.push_str(if self.macros.contains_key(&name) { "1" } else { "0" });
                    i = end;
                } else {
                    out.push_str(&ident);
                }
            } else {
                out.push(chars[i]);
                i += 1;
            }
        }
        out
    }
}

fn split_directive(directive: &str) -> (&str, &str) {
    let end = directive
        .find(|c: char| !c.is_ascii_alphanumeric() && c != '_')
        .unwrap_or(directive.len());
    (&directive[..end], &directive[end..])
}

fn parse_macro_args(chars: &[char], open: usize) -> Option<(Vec<String>, usize)> {
    debug_assert_eq!(chars[open], '(');
    let mut args = Vec::new();
    let mut current = String::new();
    let mut depth = 1;
    let mut i = open + 1;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '(' => {
                depth += 1;
                current.push(c);
            }
            ')' => {
                depth -= 1;
                if depth == 0 {
                    args.push(current);
                    return Some((args, i + 1));
                }
                current.push(c);
            }
            ',' if depth == 1 => {
                args.push(std::mem::take(&mut current));
            }
            '"' | '\'' => {
                current.push(c);
                i += 1;
                while i < chars.len() {
                    current.push(chars[i]);
                    if chars[i] == '\\' && i + 1 < chars.len() {
                        current.push(chars[i + 1]);
                        i += 2;
                        continue;
                    }
                    if chars[i] == c {
                        break;
                    }
                    i += 1;
                }
            }
            _ => current.push(c),
        }
        i += 1;
    }
    None // unterminated on this line; treat as plain text
}

fn substitute_params(body: &str, params: &[String], args: &[String]) -> String {
    let mut out = String::with_capacity(body.len());
    let chars: Vec<char> = body.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let ident: String = chars[start..i].iter().collect();
            match params.iter().position(|p| *p == ident) {
                Some(idx) => out.push_str(args.get(idx).map(String::as_str).unwrap_or("")),
                None => out.push_str(&ident),
            }
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

/// Strip `//` and `/* */` comments from one logical line, tracking block
/// comments across lines. Comment bodies become a single space.
fn strip_comments(line: &str, in_block: &mut bool) -> String {
    let mut out = String::with_capacity(line.len());
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if *in_block {
            if chars[i] == '*' && i + 1 < chars.len() && chars[i + 1] == '/' {
                *in_block = false;
                out.push(' ');
                i += 2;
            } else {
                i += 1;
            }
            continue;
        }
        let c = chars[i];
        match c {
            '/' if i + 1 < chars.len() && chars[i + 1] == '/' => break,
            '/' if i + 1 < chars.len() && chars[i + 1] == '*' => {
                *in_block = true;
                i += 2;
            }
            '"' | '\'' => {
                out.push(c);
                i += 1;
                while i < chars.len() {
                    out.push(chars[i]);
                    if chars[i] == '\\' && i + 1 < chars.len() {
                        out.push(chars[i + 1]);
                        i += 2;
                        continue;
                    }
                    if chars[i] == c {
                        i += 1;
                        break;
                    }
                    i += 1;
                }
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out.trim_end().to_string()
}

// --- expression parser ---------------------------------------------------

struct ExprParser<'a> {
    chars: Vec<char>,
    pos: usize,
    _text: &'a str,
}

impl<'a> ExprParser<'a> {
    fn new(text: &'a str) -> Self {
        ExprParser {
            chars: text.chars().collect(),
            pos: 0,
            _text: text,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn peek2(&self) -> (Option<char>, Option<char>) {
        (
            self.chars.get(self.pos).copied(),
            self.chars.get(self.pos + 1).copied(),
        )
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        let candidates: Vec<char> = s.chars().collect();
        if self.chars[self.pos..].starts_with(&candidates) {
            self.pos += candidates.len();
            true
        } else {
            false
        }
    }

    /// Precedence-climbing over the C preprocessor operator set.
    fn parse_expr(&mut self, min_prec: u8) -> Result<i64, String> {
        let mut lhs = self.parse_unary()?;
        loop {
            self.skip_ws();
            let (op, prec, len): (&str, u8, usize) = match self.peek2() {
                (Some('|'), Some('|')) => ("||", 1, 2),
                (Some('&'), Some('&')) => ("&&", 2, 2),
                (Some('|'), _) => ("|", 3, 1),
                (Some('^'), _) => ("^", 4, 1),
                (Some('&'), _) => ("&", 5, 1),
                (Some('='), Some('=')) => ("==", 6, 2),
                (Some('!'), Some('=')) => ("!=", 6, 2),
                (Some('<'), Some('=')) => ("<=", 7, 2),
                (Some('>'), Some('=')) => (">=", 7, 2),
                (Some('<'), Some('<')) => ("<<", 8, 2),
                (Some('>'), Some('>')) => (">>", 8, 2),
                (Some('<'), _) => ("<", 7, 1),
                (Some('>'), _) => (">", 7, 1),
                (Some('+'), _) => ("+", 9, 1),
                (Some('-'), _) => ("-", 9, 1),
                (Some('*'), _) => ("*", 10, 1),
                (Some('/'), _) => ("/", 10, 1),
                (Some('%'), _) => ("%", 10, 1),
                _ => break,
            };
            if prec < min_prec {
                break;
            }
            self.pos += len;
            let rhs = self.parse_expr(prec + 1)?;
            lhs = match op {
                "||" => ((lhs != 0) || (rhs != 0)) as i64,
                "&&" => ((lhs != 0) && (rhs != 0)) as i64,
                "|" => lhs | rhs,
                "^" => lhs ^ rhs,
                "&" => lhs & rhs,
                "==" => (lhs == rhs) as i64,
                "!=" => (lhs != rhs) as i64,
                "<=" => (lhs <= rhs) as i64,
                ">=" => (lhs >= rhs) as i64,
                "<<" => lhs.wrapping_shl(rhs as u32),
                ">>" => lhs.wrapping_shr(rhs as u32),
                "<" => (lhs < rhs) as i64,
                ">" => (lhs > rhs) as i64,
                "+" => lhs.wrapping_add(rhs),
                "-" => lhs.wrapping_sub(rhs),
                "*" => lhs.wrapping_mul(rhs),
                "/" => {
                    if rhs == 0 {
                        return Err("division by zero".into());
                    }
                    lhs / rhs
                }
                "%" => {
                    if rhs == 0 {
                        return Err("modulo by zero".into());
                    }
                    lhs % rhs
                }
                _ => unreachable!(),
            };
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<i64, String> {
        self.skip_ws();
        if self.eat("!") {
            return Ok((self.parse_unary()? == 0) as i64);
        }
        if self.eat("~") {
            return Ok(!self.parse_unary()?);
        }
        if self.eat("-") {
            return Ok(-self.parse_unary()?);
        }
        if self.eat("+") {
            return self.parse_unary();
        }
        if self.eat("(") {
            let value = self.parse_expr(0)?;
            if !self.eat(")") {
                return Err("missing closing parenthesis".into());
            }
            return Ok(value);
        }
        self.parse_atom()
    }

    fn parse_atom(&mut self) -> Result<i64, String> {
        self.skip_ws();
        let Some(&c) = self.chars.get(self.pos) else {
            return Err("unexpected end of expression".into());
        };
        if c.is_ascii_digit() {
            let start = self.pos;
            while self.pos < self.chars.len()
                && (self.chars[self.pos].is_ascii_alphanumeric() || self.chars[self.pos] == 'x')
            {
                self.pos += 1;
            }
            let literal: String = self.chars[start..self.pos].iter().collect();
            let trimmed = literal
                .trim_end_matches(['u', 'U', 'l', 'L'])
                .to_string();
            let parsed = if let Some(hex) = trimmed.strip_prefix("0x").or_else(|| trimmed.strip_prefix("0X")) {
                i64::from_str_radix(hex, 16)
            } else if trimmed.len() > 1 && trimmed.starts_with('0') {
                i64::from_str_radix(&trimmed[1..], 8)
            } else {
                trimmed.parse()
            };
            return parsed.map_err(|_| format!("bad integer literal `{literal}`"));
        }
        if c.is_ascii_alphabetic() || c == '_' {
            // undefined identifier after expansion: evaluates to 0
            while self.pos < self.chars.len()
                && (self.chars[self.pos].is_ascii_alphanumeric() || self.chars[self.pos] == '_')
            {
                self.pos += 1;
            }
            return Ok(0);
        }
        if c == '\'' {
            // character constant: value of the (first) character
            self.pos += 1;
            let mut value = 0i64;
            if let Some(&ch) = self.chars.get(self.pos) {
                if ch == '\\' {
                    self.pos += 1;
                    value = match self.chars.get(self.pos) {
                        Some('n') => 10,
                        Some('t') => 9,
                        Some('0') => 0,
                        Some(&other) => other as i64,
                        None => 0,
                    };
                } else {
                    value = ch as i64;
                }
                self.pos += 1;
            }
            if self.chars.get(self.pos) == Some(&'\'') {
                self.pos += 1;
            }
            return Ok(value);
        }
        Err(format!("unexpected character `{c}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn pp(dir: &Path, main: &str, opts: &PreprocessOptions) -> String {
        preprocess_file(&dir.join(main), opts).unwrap()
    }

    fn write(dir: &Path, name: &str, content: &str) {
        fs::write(dir.join(name), content).unwrap();
    }

    fn opts_with(defines: &[(&str, Option<&str>)]) -> PreprocessOptions {
        PreprocessOptions {
            defines: defines
                .iter()
                .map(|(k, v)| (k.to_string(), v.map(String::from)))
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn conditional_inclusion_follows_defines() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "a.c",
            "#ifdef USE_MPI\nint mpi_path;\n#else\nint serial_path;\n#endif\n",
        );
        let with = pp(dir.path(), "a.c", &opts_with(&[("USE_MPI", Some("1"))]));
        assert!(with.contains("mpi_path"));
        assert!(!with.contains("serial_path"));
        let without = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert!(without.contains("serial_path"));
        assert!(!without.contains("mpi_path"));
    }

    #[test]
    fn if_expressions_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "a.c",
            concat!(
                "#if defined(A) && (VALUE > 2 || !defined(B))\n",
                "int yes;\n",
                "#elif VALUE == 2\n",
                "int elif_branch;\n",
                "#else\n",
                "int no;\n",
                "#endif\n"
            ),
        );
        let out = pp(dir.path(), "a.c", &opts_with(&[("A", None), ("VALUE", Some("3"))]));
        assert!(out.contains("int yes;"));
        let out = pp(dir.path(), "a.c", &opts_with(&[("VALUE", Some("2"))]));
        assert!(out.contains("elif_branch"));
        let out = pp(dir.path(), "a.c", &opts_with(&[("B", None), ("VALUE", Some("1"))]));
        assert!(out.contains("int no;"));
    }

    #[test]
    fn object_and_function_macros_expand() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "a.c",
            concat!(
                "#define N 16\n",
                "#define SQUARE(x) ((x) * (x))\n",
                "int arr[N];\n",
                "int s = SQUARE(N + 1);\n"
            ),
        );
        let out = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert!(out.contains("int arr[16];"));
        assert!(out.contains("int s = ((16 + 1) * (16 + 1));"));
    }

    #[test]
    fn recursive_macros_do_not_loop() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.c", "#define X X\nint v = X;\n");
        let out = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert!(out.contains("int v = X;"));
    }

    #[test]
    fn includes_resolve_and_emit_markers() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("inc")).unwrap();
        write(dir.path(), "inc/h.h", "#pragma once\nint from_header;\n");
        write(dir.path(), "a.c", "#include \"inc/h.h\"\n#include \"inc/h.h\"\nint after;\n");
        let out = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert_eq!(out.matches("from_header").count(), 1); // pragma once
        assert!(out.contains("int after;"));
        assert!(out.contains(&format!("# 1 \"{}\"", dir.path().join("a.c").display())));
        assert!(out.contains(&format!("# 2 \"{}\"", dir.path().join("inc/h.h").display())));
    }

    #[test]
    fn include_search_order_quoted_then_dirs() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sys")).unwrap();
        write(dir.path(), "sys/only.h", "int sys_version;\n");
        write(dir.path(), "a.c", "#include <only.h>\nint x;\n");
        let opts = PreprocessOptions {
            include_dirs: vec![dir.path().join("sys")],
            ..Default::default()
        };
        let out = pp(dir.path(), "a.c", &opts);
        assert!(out.contains("sys_version"));
        // missing include errors out
        write(dir.path(), "b.c", "#include <missing.h>\n");
        assert!(preprocess_file(&dir.path().join("b.c"), &opts).is_err());
    }

    #[test]
    fn comments_stripped_pragmas_survive() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "a.c",
            concat!(
                "// line comment with #define NOISE\n",
                "/* block\n   comment */ int real;\n",
                "#pragma omp parallel for\n",
                "for_loop();\n",
                "const char *s = \"// not a comment\";\n"
            ),
        );
        let out = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert!(!out.contains("NOISE"));
        assert!(out.contains("int real;"));
        assert!(out.contains("#pragma omp parallel for"));
        assert!(out.contains("\"// not a comment\""));
    }

    #[test]
    fn line_splicing_joins_continuations() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.c", "#define LONG 1 + \\\n 2\nint v = LONG;\n");
        let out = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert!(out.contains("int v = 1 +  2;"));
    }

    #[test]
    fn pound_error_fails() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.c", "#if !defined(REQUIRED)\n#error REQUIRED missing\n#endif\n");
        assert!(preprocess_file(&dir.path().join("a.c"), &PreprocessOptions::default()).is_err());
        assert!(preprocess_file(
            &dir.path().join("a.c"),
            &opts_with(&[("REQUIRED", None)])
        )
        .is_ok());
    }

    #[test]
    fn from_flags_parses_defines_undefs_includes() {
        let flags = ["-DUSE_MPI=1", "-DOTHER", "-I/some/inc", "-isystem", "/sys/inc", "-UOTHER", "-O2"];
        let opts = PreprocessOptions::from_flags(flags.iter().copied());
        assert_eq!(opts.defines.len(), 2);
        assert_eq!(opts.defines[0], ("USE_MPI".to_string(), Some("1".to_string())));
        assert_eq!(opts.undefines, vec!["OTHER"]);
        assert_eq!(
            opts.include_dirs,
            vec![PathBuf::from("/some/inc"), PathBuf::from("/sys/inc")]
        );
    }

    #[test]
    fn deterministic_output() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "h.h", "#define K 2\n");
        write(dir.path(), "a.c", "#include \"h.h\"\nint v[K];\n");
        let a = pp(dir.path(), "a.c", &PreprocessOptions::default());
        let b = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert_eq!(a, b);
    }

    #[test]
    fn nested_conditionals() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "a.c",
            concat!(
                "#ifdef OUTER\n",
                "#ifdef INNER\n",
                "int both;\n",
                "#else\n",
                "int outer_only;\n",
                "#endif\n",
                "#endif\n"
            ),
        );
        let out = pp(dir.path(), "a.c", &opts_with(&[("OUTER", None)]));
        assert!(out.contains("outer_only"));
        assert!(!out.contains("both"));
        let out = pp(dir.path(), "a.c", &PreprocessOptions::default());
        assert!(!out.contains("outer_only"));
    }
}
