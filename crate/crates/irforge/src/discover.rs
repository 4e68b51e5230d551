//! LLM-assisted specialization discovery and its evaluation harness.
//!
//! Build systems encode specialization points in too many idioms to parse
//! mechanically, so discovery renders a structured prompt around the build
//! files and the catalog schema, sends it to a model provider, and validates
//! the response against the schema. The offline fixture provider makes the
//! whole path deterministic and network-free; evaluation compares extracted
//! specializations against ground truth as (category, name, flag) triples.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{validate_catalog_value, CatalogError, SpecializationCatalog};
use crate::flags::normalize_flag;

/// The discovery prompt template shipped with the crate. Contains the
/// `{file_content}` and `{schema}` slots, each exactly once.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/discovery_prompt.txt");

#[derive(Debug, Error)]
pub enum DiscoverError {
    #[error("no build files supplied")]
    EmptyInput,
    #[error("model response contains no JSON document")]
    Unparseable,
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("provider error ({status}): {body}")]
    ProviderError { status: u16, body: String },
    #[error("provider timed out after {0:?}")]
    Timeout(Duration),
    #[error("api key environment variable {0} not set")]
    MissingApiKey(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("provider config: {0}")]
    Config(String),
}

// --- Prompt assembly ---------------------------------------------------------------

/// Render the discovery prompt: build files (with per-file headers) into the
/// `{file_content}` slot, the schema text into `{schema}`, optional
/// in-context examples ahead of the build-file section.
pub fn build_prompt(
    build_files: &[(String, String)],
    schema: &str,
    examples: Option<&[(String, String)]>,
) -> Result<String, DiscoverError> {
    if build_files.is_empty() {
        return Err(DiscoverError::EmptyInput);
    }
    let mut file_content = String::new();
    for (index, (name, content)) in build_files.iter().enumerate() {
        file_content.push_str(&format!("\n### File {}: {}\n", index + 1, name));
        file_content.push_str(content);
        if !content.ends_with('\n') {
            file_content.push('\n');
        }
    }

    let mut prompt = PROMPT_TEMPLATE
        .replacen("{file_content}", &file_content, 1)
        .replacen("{schema}", schema, 1);

    if let Some(examples) = examples {
        if !examples.is_empty() {
            let mut block = String::from("Examples of specialization points from similar projects:\n");
            for (name, content) in examples {
                block.push_str(&format!("### Example: {name}\n{content}\n"));
            }
            block.push('\n');
            let anchor = "Here is the build file:";
            if let Some(pos) = prompt.find(anchor) {
                prompt.insert_str(pos, &block);
            } else {
                prompt.push_str(&block);
            }
        }
    }
    Ok(prompt)
}

// --- Response parsing ---------------------------------------------------------------

/// Strip a Markdown code fence if the response is wrapped in one.
fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(open) = trimmed.find("```") else {
        return trimmed;
    };
    let after_open = &trimmed[open + 3..];
    let body_start = match after_open.find('\n') {
        Some(newline) => newline + 1,
        None => return trimmed,
    };
    let body = &after_open[body_start..];
    match body.rfind("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Parse a model response into a validated catalog: code fences are
/// stripped, the JSON document extracted, then validated and normalized.
pub fn parse_response(text: &str) -> Result<SpecializationCatalog, DiscoverError> {
    let candidate = strip_code_fence(text);
    let value: Value = match serde_json::from_str(candidate) {
        Ok(value) => value,
        Err(_) => {
            // fall back to the outermost braced span
            let start = candidate.find('{');
            let end = candidate.rfind('}');
            match (start, end) {
                (Some(s), Some(e)) if s < e => {
                    serde_json::from_str(&candidate[s..=e]).map_err(|_| DiscoverError::Unparseable)?
                }
                _ => return Err(DiscoverError::Unparseable),
            }
        }
    };
    Ok(validate_catalog_value(&value)?)
}

// --- Evaluation -----------------------------------------------------------------------

/// Extraction counts and the derived precision/recall/F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalMetrics {
    /// Compute the metrics from raw counts: precision = tp/(tp+fp),
    /// recall = tp/(tp+fn), f1 = 2PR/(P+R); zero denominators give zero.
    pub fn from_counts(tp: usize, fp: usize, false_negatives: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + false_negatives == 0 {
            0.0
        } else {
            tp as f64 / (tp + false_negatives) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalMetrics { tp, fp, false_negatives, precision, recall, f1 }
    }
}

type Triple = (String, String, String);

fn fold_name(name: &str) -> String {
    name.to_lowercase().replace('-', "_")
}

fn canonical_flag(raw: &str, normalize: bool) -> String {
    if !normalize {
        return raw.to_string();
    }
    normalize_flag(raw).map(|f| f.raw()).unwrap_or_else(|_| raw.to_string())
}

fn entry_flag(entry: &Value, normalize: bool) -> String {
    entry
        .get("build_flag")
        .and_then(Value::as_str)
        .map(|f| canonical_flag(f, normalize))
        .unwrap_or_default()
}

/// Extract comparison triples (category, name, canonical flag) from a
/// catalog-shaped JSON document. Each map entry, list element, simd level,
/// and the build system characterization count as one item.
fn extract_triples(doc: &Value, normalize: bool) -> BTreeSet<Triple> {
    let mut triples = BTreeSet::new();
    let fold = |name: &str| if normalize { fold_name(name) } else { name.to_string() };

    if let Some(gpu_build) = doc.get("gpu_build") {
        if gpu_build.get("value").and_then(Value::as_bool) == Some(true) {
            triples.insert((
                "gpu_build".into(),
                "gpu_build".into(),
                entry_flag(gpu_build, normalize),
            ));
        }
    }
    for category in [
        "gpu_backends",
        "parallel_programming_libraries",
        "linear_algebra_libraries",
        "FFT_libraries",
        "other_external_libraries",
        "simd_vectorization",
    ] {
        if let Some(map) = doc.get(category).and_then(Value::as_object) {
            for (name, entry) in map {
                triples.insert((category.to_lowercase(), fold(name), entry_flag(entry, normalize)));
            }
        }
    }
    if let Some(map) = doc.get("compilers").and_then(Value::as_object) {
        for name in map.keys() {
            triples.insert(("compilers".into(), fold(name), String::new()));
        }
    }
    if let Some(list) = doc.get("architectures").and_then(Value::as_array) {
        for item in list.iter().filter_map(Value::as_str) {
            triples.insert(("architectures".into(), fold(item), String::new()));
        }
    }
    for category in ["compiler_flags", "optimization_build_flags"] {
        if let Some(list) = doc.get(category).and_then(Value::as_array) {
            for item in list.iter().filter_map(Value::as_str) {
                triples.insert((category.into(), canonical_flag(item, normalize), String::new()));
            }
        }
    }
    if let Some(kind) = doc
        .get("build_system")
        .and_then(|b| b.get("type"))
        .and_then(Value::as_str)
    {
        triples.insert(("build_system".into(), fold(kind), String::new()));
    }
    if let Some(internal) = doc.get("internal_build") {
        if let Some(name) = internal.get("library_name").and_then(Value::as_str) {
            if !name.is_empty() {
                triples.insert((
                    "internal_build".into(),
                    fold(name),
                    entry_flag(internal, normalize),
                ));
            }
        }
    }
    triples
}

/// Compare two catalog-shaped JSON documents as triple sets. `normalize`
/// controls whether names fold case and hyphen/underscore and flags take
/// canonical form before comparison.
pub fn evaluate_values(predicted: &Value, truth: &Value, normalize: bool) -> EvalMetrics {
    let predicted = extract_triples(predicted, normalize);
    let truth = extract_triples(truth, normalize);
    let tp = predicted.intersection(&truth).count();
    let fp = predicted.difference(&truth).count();
    let false_negatives = truth.difference(&predicted).count();
    EvalMetrics::from_counts(tp, fp, false_negatives)
}

/// Evaluate a predicted catalog against ground truth. Both are normalized
/// catalogs; comparison happens on (category, name, canonical flag) triples
/// with case and hyphen/underscore folding on names.
pub fn evaluate(predicted: &SpecializationCatalog, truth: &SpecializationCatalog) -> EvalMetrics {
    let predicted = serde_json::to_value(predicted).expect("catalog serializes");
    let truth = serde_json::to_value(truth).expect("catalog serializes");
    evaluate_values(&predicted, &truth, true)
}

/// Per-category breakdown alongside the overall metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBreakdown {
    pub overall: EvalMetrics,
    pub per_category: std::collections::BTreeMap<String, EvalMetrics>,
    /// Counting conventions recorded with the output.
    pub notes: Vec<String>,
}

pub fn evaluate_with_breakdown(
    predicted: &SpecializationCatalog,
    truth: &SpecializationCatalog,
) -> EvalBreakdown {
    let predicted = serde_json::to_value(predicted).expect("catalog serializes");
    let truth = serde_json::to_value(truth).expect("catalog serializes");
    let predicted_triples = extract_triples(&predicted, true);
    let truth_triples = extract_triples(&truth, true);

    let categories: BTreeSet<&String> = predicted_triples
        .iter()
        .chain(truth_triples.iter())
        .map(|(c, _, _)| c)
        .collect();
    let mut per_category = std::collections::BTreeMap::new();
    for category in categories {
        let p: BTreeSet<&Triple> = predicted_triples.iter().filter(|t| &t.0 == category).collect();
        let t: BTreeSet<&Triple> = truth_triples.iter().filter(|t| &t.0 == category).collect();
        let tp = p.intersection(&t).count();
        per_category.insert(
            category.clone(),
            EvalMetrics::from_counts(tp, p.len() - tp, t.len() - tp),
        );
    }
    EvalBreakdown {
        overall: evaluate_values(&predicted, &truth, true),
        per_category,
        notes: vec!["simd vectorization levels counted as individual items".into()],
    }
}

// --- Model providers ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Live,
    Offline,
}

/// Provider configuration file. API keys come from the environment only,
/// never from the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
}

fn default_api_key_env() -> String {
    "IRFORGE_API_KEY".to_string()
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Usage {
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
}

/// Query the configured provider. The offline provider returns its fixture
/// verbatim with zeroed usage, making repeated runs deterministic.
pub fn query_model(prompt: &str, config: &ProviderConfig) -> Result<ModelResponse, DiscoverError> {
    match config.kind {
        ProviderKind::Offline => {
            let path = config
                .fixture_path
                .as_ref()
                .ok_or_else(|| DiscoverError::Config("offline provider needs fixture_path".into()))?;
            let text = std::fs::read_to_string(path)?;
            Ok(ModelResponse { text, usage: Usage::default() })
        }
        ProviderKind::Live => query_live(prompt, config),
    }
}

fn query_live(prompt: &str, config: &ProviderConfig) -> Result<ModelResponse, DiscoverError> {
    let endpoint = config
        .endpoint
        .as_ref()
        .ok_or_else(|| DiscoverError::Config("live provider needs endpoint".into()))?;
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| DiscoverError::Config("live provider needs model".into()))?;
    let key = std::env::var(&config.api_key_env)
        .map_err(|_| DiscoverError::MissingApiKey(config.api_key_env.clone()))?;
    let timeout = Duration::from_secs(config.timeout_seconds);

    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| DiscoverError::Config(e.to_string()))?;
    let body = serde_json::json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
    });

    let started = Instant::now();
    let response = client
        .post(endpoint)
        .bearer_auth(key)
        .json(&body)
        .send()
        .map_err(|e| {
            if e.is_timeout() {
                DiscoverError::Timeout(timeout)
            } else {
                DiscoverError::ProviderError { status: 0, body: e.to_string() }
            }
        })?;
    let latency = started.elapsed().as_secs_f64();

    let status = response.status().as_u16();
    let text = response
        .text()
        .map_err(|e| DiscoverError::ProviderError { status, body: e.to_string() })?;
    if !(200..300).contains(&status) {
        return Err(DiscoverError::ProviderError { status, body: text });
    }
    let parsed: Value =
        serde_json::from_str(&text).map_err(|e| DiscoverError::ProviderError {
            status,
            body: format!("bad provider payload: {e}"),
        })?;
    let content = parsed["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| DiscoverError::ProviderError {
            status,
            body: "no message content in provider payload".into(),
        })?
        .to_string();
    Ok(ModelResponse {
        text: content,
        usage: Usage {
            tokens_in: parsed["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            tokens_out: parsed["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            latency_seconds: latency,
        },
    })
}
