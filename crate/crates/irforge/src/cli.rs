//! Command-line entry point: `probe`, `match`, `scan`, `dedup`, `build`,
//! `deploy`, `discover`, `eval`.
//!
//! Exit codes: 0 on success, 1 for domain errors, 2 for usage errors. With
//! `--json`, domain errors print as a single-line machine-parseable record
//! on stderr.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::buildscan;
use crate::catalog;
use crate::dedup;
use crate::deploy;
use crate::discover;
use crate::driver::ToolchainDriver;
use crate::forge;
use crate::matcher::{self, Assignment, Provenance, ResolvedConfig, VectorLevelTable};
use crate::sysprobe::{self, ProbeInput};

/// A domain error with a stable kind tag for machine-readable output.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

macro_rules! impl_from_error {
    ($ty:ty, $kind:expr) => {
        impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::new($kind, err.to_string())
            }
        }
    };
}

impl_from_error!(catalog::CatalogError, "catalog");
impl_from_error!(sysprobe::ProbeError, "probe");
impl_from_error!(matcher::ResolveError, "resolve");
impl_from_error!(buildscan::ScanError, "scan");
impl_from_error!(dedup::DedupError, "dedup");
impl_from_error!(forge::ForgeError, "forge");
impl_from_error!(deploy::DeployError, "deploy");
impl_from_error!(discover::DiscoverError, "discover");
impl_from_error!(crate::driver::DriverError, "driver");
impl_from_error!(serde_json::Error, "json");
impl_from_error!(std::io::Error, "io");

#[derive(Debug, Parser)]
#[command(
    name = "irforge",
    version,
    about = "Build-configuration deduplication and deploy-time specialization for IR containers"
)]
pub struct Cli {
    /// Emit machine-readable output and error records.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Discover target-system features from live probes or a declared bundle.
    Probe(ProbeArgs),
    /// Intersect a specialization catalog with a system feature report.
    #[command(name = "match")]
    Match(MatchArgs),
    /// Ingest compile-command databases from configured builds.
    Scan(ScanArgs),
    /// Compute the distinct-IR plan and report across configurations.
    Dedup(DedupArgs),
    /// Emit IR artifacts and render the container recipe and manifests.
    Build(BuildArgs),
    /// Plan (and optionally execute) a specialized deployment.
    Deploy(DeployArgs),
    /// Extract a specialization catalog from build files via a model provider.
    Discover(DiscoverArgs),
    /// Compare a predicted catalog against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Declared probe bundle (JSON); default is a live probe of this host.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Merge live probes underneath the declared bundle.
    #[arg(long)]
    pub live: bool,
    /// Output file for the feature report (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Selections as point=value pairs.
    #[arg(long = "select", value_name = "POINT=VALUE")]
    pub select: Vec<String>,
    /// Operator preference file (JSON map of point to value).
    #[arg(long)]
    pub prefs: Option<PathBuf>,
    /// Override the vectorization requirement table.
    #[arg(long)]
    pub vector_table: Option<PathBuf>,
    /// Read additional point=value selections from stdin, one per line.
    #[arg(long)]
    pub interactive: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also resolve the selection and write the resolved configuration.
    #[arg(long)]
    pub out_resolved: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Configured builds as NAME=COMPILE_DB_FILE pairs.
    #[arg(long = "config", value_name = "NAME=DBFILE", required = true)]
    pub configs: Vec<String>,
    #[arg(long)]
    pub build_root: PathBuf,
    /// Workspace file supplying the configuration matrix.
    #[arg(long)]
    pub workspace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Scan snapshot produced by `irforge scan`.
    #[arg(long)]
    pub scan: PathBuf,
    /// Driver spec: `builtin`, `clang`, or a TOML file.
    #[arg(long)]
    pub driver: String,
    /// File listing user-declared system-dependent targets.
    #[arg(long)]
    pub sd_list: Option<PathBuf>,
    /// Parallelism width for preprocessing.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out_plan: PathBuf,
    #[arg(long)]
    pub out_report: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub driver: String,
    /// IR store directory (defaults to $IRFORGE_STORE).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Base layer map (JSON).
    #[arg(long)]
    pub bases: PathBuf,
    #[arg(long)]
    pub out_recipe: PathBuf,
    #[arg(long)]
    pub out_manifests: PathBuf,
    /// Also write the rendered container build file.
    #[arg(long)]
    pub emit_dockerfile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    #[arg(long = "select", value_name = "POINT=VALUE", required = true)]
    pub select: Vec<String>,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub vector_table: Option<PathBuf>,
    /// Execute the lowering steps instead of only planning.
    #[arg(long)]
    pub execute: bool,
    /// Driver spec, required with --execute.
    #[arg(long)]
    pub driver: Option<String>,
    /// IR store directory (defaults to $IRFORGE_STORE).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Root for substituted build paths during execution.
    #[arg(long)]
    pub root: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[arg(long = "build-file", required = true)]
    pub build_files: Vec<PathBuf>,
    #[arg(long)]
    pub provider: PathBuf,
    /// Schema text override (defaults to the bundled schema).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// In-context examples file (JSON array of {name, content}).
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Include a per-category breakdown.
    #[arg(long)]
    pub per_category: bool,
}

// --- Workspace configuration ------------------------------------------------------

/// Workspace description: project, build root, configuration matrix, driver
/// and store defaults.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct WorkspaceConfig {
    pub project: String,
    pub build_root: PathBuf,
    #[serde(default)]
    pub driver: Option<String>,
    #[serde(default)]
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub matrix: BTreeMap<String, Vec<String>>,
}

impl WorkspaceConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| CliError::new("workspace", format!("{}: {e}", path.display())))
    }
}

/// Expand a specialization-point matrix into the full Cartesian product of
/// configurations, in deterministic order: lexicographic by point name,
/// then by the declared value order.
pub fn expand_matrix(
    points: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<BTreeMap<String, String>>, CliError> {
    for (point, values) in points {
        if values.is_empty() {
            return Err(CliError::new("matrix", format!("empty axis: {point}")));
        }
    }
    let names: Vec<&String> = points.keys().collect();
    let mut configs = vec![BTreeMap::new()];
    for name in names {
        let values = &points[name];
        let mut next = Vec::with_capacity(configs.len() * values.len());
        for config in &configs {
            for value in values {
                let mut grown: BTreeMap<String, String> = config.clone();
                grown.insert(name.clone(), value.clone());
                next.push(grown);
            }
        }
        configs = next;
    }
    Ok(configs)
}

/// Canonical configuration name for a matrix assignment: `point-value`
/// segments joined by `_` in point order.
pub fn matrix_config_name(assignment: &BTreeMap<String, String>) -> String {
    assignment
        .iter()
        .map(|(k, v)| format!("{k}-{v}"))
        .collect::<Vec<_>>()
        .join("_")
}

// --- Helpers -------------------------------------------------------------------------

fn parse_pairs(pairs: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for pair in pairs {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::new("usage", format!("expected POINT=VALUE, got {pair}")))?;
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

fn load_vector_table(path: &Option<PathBuf>) -> Result<VectorLevelTable, CliError> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            VectorLevelTable::from_json(&text)
                .map_err(|e| CliError::new("matcher", format!("bad vector table: {e}")))
        }
        None => Ok(VectorLevelTable::builtin()),
    }
}

fn write_output(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn store_dir(flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    if let Some(dir) = flag {
        return Ok(dir.clone());
    }
    std::env::var_os("IRFORGE_STORE")
        .map(PathBuf::from)
        .ok_or_else(|| CliError::new("usage", "--store or IRFORGE_STORE required"))
}

// --- Dispatch -------------------------------------------------------------------------

/// Run a parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            if json {
                let record = serde_json::json!({
                    "error": {"kind": err.kind, "message": err.message}
                });
                eprintln!("{record}");
            } else {
                eprintln!("error: {err}");
            }
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Probe(args) => cmd_probe(args),
        Command::Match(args) => cmd_match(args, cli.json),
        Command::Scan(args) => cmd_scan(args),
        Command::Dedup(args) => cmd_dedup(args, cli.json),
        Command::Build(args) => cmd_build(args, cli.json),
        Command::Deploy(args) => cmd_deploy(args, cli.json),
        Command::Discover(args) => cmd_discover(args, cli.json),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let input = match (&args.bundle, args.live) {
        (Some(path), live) => {
            let text = std::fs::read_to_string(path)?;
            let bundle: serde_json::Value = serde_json::from_str(&text)?;
            if live {
                ProbeInput::declared_over_live(bundle)
            } else {
                ProbeInput::declared(bundle)
            }
        }
        (None, _) => ProbeInput::live(),
    };
    let report = sysprobe::discover_system(&input)?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    let text = report.to_json();
    match &args.out {
        Some(path) => write_output(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_match(args: MatchArgs, json: bool) -> Result<(), CliError> {
    let catalog = catalog::validate_catalog(&std::fs::read_to_string(&args.catalog)?)?;
    let features: sysprobe::SystemFeatureReport =
        serde_json::from_str(&std::fs::read_to_string(&args.features)?)?;
    let table = load_vector_table(&args.vector_table)?;

    let outcome = matcher::intersect(&catalog, &features, &table);
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    write_output(&args.out, &outcome.common.to_document())?;

    if !json {
        print_option_table(&outcome.common);
    }

    let mut choices = parse_pairs(&args.select)?;
    if args.interactive {
        let stdin = std::io::stdin();
        for line in stdin.lock().lines() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                break;
            }
            if let Some((point, value)) = trimmed.split_once('=') {
                choices.insert(point.trim().to_string(), value.trim().to_string());
            }
        }
    }

    if args.out_resolved.is_some() || !choices.is_empty() {
        let prefs = match &args.prefs {
            Some(path) => Some(serde_json::from_str::<BTreeMap<String, String>>(
                &std::fs::read_to_string(path)?,
            )?),
            None => None,
        };
        let resolved = matcher::resolve(&outcome.common, &choices, prefs.as_ref())?;
        let text = {
            let mut t = serde_json::to_string_pretty(&resolved).expect("config serializes");
            t.push('\n');
            t
        };
        match &args.out_resolved {
            Some(path) => write_output(path, &text)?,
            None => print!("{text}"),
        }
    }
    Ok(())
}

fn print_option_table(common: &matcher::CommonSpecialization) {
    println!("available specialization points:");
    if !common.gpu_backends.is_empty() {
        let options: Vec<String> = common
            .gpu_backends
            .iter()
            .map(|(name, v)| match &v.version {
                Some(version) => format!("{name} ({version})"),
                None => name.clone(),
            })
            .collect();
        println!("  gpu: {}", options.join(", "));
    }
    if !common.vectorization_flags.is_empty() {
        let options: Vec<&str> = common.vectorization_flags.keys().map(String::as_str).collect();
        println!("  simd: {}", options.join(", "));
    }
    if !common.parallel.is_empty() {
        let options: Vec<&str> = common.parallel.keys().map(String::as_str).collect();
        println!("  parallel: {}", options.join(", "));
    }
    if !common.libraries.is_empty() {
        let options: Vec<&str> = common.libraries.keys().map(String::as_str).collect();
        println!("  libraries: {}", options.join(", "));
    }
    if common.is_empty() {
        println!("  (empty intersection)");
    }
}

fn cmd_scan(args: ScanArgs) -> Result<(), CliError> {
    let mut configs = Vec::new();
    for spec in &args.configs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::new("usage", format!("expected NAME=DBFILE, got {spec}")))?;
        configs.push((name.to_string(), PathBuf::from(path)));
    }

    let mut assignments: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    if let Some(workspace_path) = &args.workspace {
        let workspace = WorkspaceConfig::load(workspace_path)?;
        for assignment in expand_matrix(&workspace.matrix)? {
            assignments.insert(matrix_config_name(&assignment), assignment);
        }
        for (name, _) in &configs {
            if !assignments.contains_key(name) {
                eprintln!(
                    "warning: config {name} not in the {} matrix; no assignments attached",
                    workspace.project
                );
            }
        }
    }

    let scan = buildscan::scan(&configs, &args.build_root, &assignments)?;
    write_output(&args.out, &scan.to_json())?;
    Ok(())
}

fn read_sd_list(path: &Option<PathBuf>) -> Result<Vec<(String, String)>, CliError> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let text = std::fs::read_to_string(path)?;
    #[derive(serde::Deserialize)]
    struct SdEntry {
        source: String,
        output: String,
    }
    let entries: Vec<SdEntry> = serde_json::from_str(&text)?;
    Ok(entries.into_iter().map(|e| (e.source, e.output)).collect())
}

fn cmd_dedup(args: DedupArgs, json: bool) -> Result<(), CliError> {
    let scan = buildscan::ScanOutput::from_json(&std::fs::read_to_string(&args.scan)?)?;
    let driver = ToolchainDriver::from_spec_str(&args.driver)?;
    let options = dedup::DedupOptions { jobs: args.jobs, user_sd: read_sd_list(&args.sd_list)? };
    let (plan, report) = dedup::dedup(&scan, &driver, &options)?;
    write_output(&args.out_plan, &plan.to_json())?;
    write_output(&args.out_report, &report.to_json())?;
    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        println!(
            "{} configurations, {} targets -> {} distinct IR files (reduction {:.4})",
            report.n_configs, report.sum_t, report.t_prime, report.reduction
        );
    }
    Ok(())
}

fn cmd_build(args: BuildArgs, json: bool) -> Result<(), CliError> {
    let plan = dedup::DedupPlan::from_json(&std::fs::read_to_string(&args.plan)?)?;
    let driver = ToolchainDriver::from_spec_str(&args.driver)?;
    let store = forge::IrStore::open(store_dir(&args.store)?)?;
    let outcome = forge::emit_ir_set(&plan, &driver, &store)?;

    let mut manifests = BTreeMap::new();
    std::fs::create_dir_all(&args.out_manifests)?;
    for config in plan.config_names() {
        let manifest = forge::render_install_manifest(config, &plan)?;
        write_output(
            &args.out_manifests.join(format!("{config}.manifest.json")),
            &manifest.to_json(),
        )?;
        manifests.insert(config.clone(), manifest);
    }

    let bases: forge::LayerMap = serde_json::from_str(&std::fs::read_to_string(&args.bases)?)?;
    let recipe = forge::render_container_recipe(&plan, &manifests, &bases)?;
    write_output(&args.out_recipe, &recipe.to_json())?;
    if let Some(path) = &args.emit_dockerfile {
        write_output(path, &recipe.dockerfile)?;
    }

    if json {
        println!(
            "{}",
            serde_json::json!({
                "artifacts": outcome.artifacts.len(),
                "emitted": outcome.emitted,
                "reused": outcome.reused,
            })
        );
    } else {
        println!(
            "{} artifacts in store ({} emitted, {} reused)",
            outcome.artifacts.len(),
            outcome.emitted,
            outcome.reused
        );
    }
    Ok(())
}

fn cmd_deploy(args: DeployArgs, json: bool) -> Result<(), CliError> {
    let recipe = forge::ContainerRecipe::from_json(&std::fs::read_to_string(&args.recipe)?)?;
    let features: sysprobe::SystemFeatureReport =
        serde_json::from_str(&std::fs::read_to_string(&args.features)?)?;
    let table = load_vector_table(&args.vector_table)?;

    let selections = parse_pairs(&args.select)?;
    let mut resolved = ResolvedConfig::default();
    for (point, value) in &selections {
        resolved.assignments.push(Assignment {
            point: point.clone(),
            value: value.clone(),
            provenance: Provenance::User,
        });
    }
    resolved.canonicalize();

    let plan = deploy::plan_deployment(&recipe, &resolved, &features, &table)?;
    if let Some(path) = &args.out {
        write_output(path, &plan.to_json())?;
    }

    if args.execute {
        let driver_spec = args
            .driver
            .as_ref()
            .ok_or_else(|| CliError::new("usage", "--execute requires --driver"))?;
        let driver = ToolchainDriver::from_spec_str(driver_spec)?;
        let store = forge::IrStore::open(store_dir(&args.store)?)?;
        let root = args.root.clone().unwrap_or_else(|| plan.build_root.clone());
        let written = deploy::execute_plan(&plan, &store, &driver, &root)?;
        if json {
            println!(
                "{}",
                serde_json::json!({"tag": plan.tag, "objects": written})
            );
        } else {
            println!("tag {}: {} objects written", plan.tag, written.len());
        }
    } else if json {
        println!(
            "{}",
            serde_json::json!({
                "tag": plan.tag,
                "config": plan.config,
                "steps": plan.steps.len(),
                "sd_compiles": plan.sd_compiles.len(),
            })
        );
    } else {
        println!(
            "tag {}: {} lower steps, {} source compiles, linking delegated to the build system",
            plan.tag,
            plan.steps.len(),
            plan.sd_compiles.len()
        );
    }
    Ok(())
}

fn cmd_discover(args: DiscoverArgs, json: bool) -> Result<(), CliError> {
    let mut files = Vec::new();
    for path in &args.build_files {
        files.push((path.display().to_string(), std::fs::read_to_string(path)?));
    }
    let schema_text = match &args.schema {
        Some(path) => std::fs::read_to_string(path)?,
        None => catalog::CATALOG_SCHEMA_TEXT.to_string(),
    };
    let examples: Option<Vec<(String, String)>> = match &args.examples {
        Some(path) => {
            #[derive(serde::Deserialize)]
            struct Example {
                name: String,
                content: String,
            }
            let parsed: Vec<Example> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            Some(parsed.into_iter().map(|e| (e.name, e.content)).collect())
        }
        None => None,
    };

    let prompt = discover::build_prompt(&files, &schema_text, examples.as_deref())?;
    let provider: discover::ProviderConfig =
        serde_json::from_str(&std::fs::read_to_string(&args.provider)?)?;
    let response = discover::query_model(&prompt, &provider)?;
    let catalog = discover::parse_response(&response.text)?;
    write_output(&args.out, &catalog.to_document())?;

    if json {
        eprintln!("{}", serde_json::json!({"usage": response.usage}));
    } else {
        eprintln!(
            "usage: {} tokens in, {} tokens out, {:.2}s",
            response.usage.tokens_in, response.usage.tokens_out, response.usage.latency_seconds
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let pred = catalog::validate_catalog(&std::fs::read_to_string(&args.pred)?)?;
    let truth = catalog::validate_catalog(&std::fs::read_to_string(&args.truth)?)?;
    if args.per_category {
        let breakdown = discover::evaluate_with_breakdown(&pred, &truth);
        println!(
            "{}",
            serde_json::to_string_pretty(&breakdown).expect("breakdown serializes")
        );
    } else {
        let metrics = discover::evaluate(&pred, &truth);
        println!(
            "{}",
            serde_json::to_string_pretty(&metrics).expect("metrics serialize")
        );
    }
    Ok(())
}
