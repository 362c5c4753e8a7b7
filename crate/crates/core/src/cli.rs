//! The `oodeval` command line: `fit`, `score`, `eval`, `gen-unittests` and
//! `report`.
//!
//! Each command validates its whole configuration before touching the output
//! location and computes everything in memory before writing, so a failing
//! run leaves no partial files behind. Exit codes: 0 ok, 2 usage, 3 data
//! error, 4 numeric degeneracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::arraystore::{load_bundle, write_matrix, EvalBundle, MatrixFile};
use crate::detectors::{score_set, Method};
use crate::fitstats::{self, FitConfig, FittedState, KlGrouping};
use crate::metrics::{self, EvalReport, DEFAULT_TPR_Q, DEFAULT_UNIT_FAIL_THRESHOLD};
use crate::unitgen::{self, Recipe, RecipeSpec, SuiteManifest};
use crate::{Error, Result};

/// OOD sets whose name starts with this prefix are unit tests.
pub const UNITTEST_PREFIX: &str = "unittest/";
/// Caps the worker threads of every parallel section.
pub const THREADS_ENV: &str = "OODEVAL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Md,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum KlGroupingArg {
    #[default]
    Predicted,
    Label,
}

impl From<KlGroupingArg> for KlGrouping {
    fn from(a: KlGroupingArg) -> Self {
        match a {
            KlGroupingArg::Predicted => KlGrouping::Predicted,
            KlGroupingArg::Label => KlGrouping::TrueLabel,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "oodeval", version, about = "Fit, score and evaluate post-hoc OOD detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit detector statistics on the ID train split and save them.
    Fit(FitArgs),
    /// Write per-sample scores for every set of a bundle.
    Score(ScoreArgs),
    /// Evaluate detectors and write per-method reports plus a summary.
    Eval(EvalArgs),
    /// Generate synthetic unit-test image suites.
    #[command(name = "gen-unittests")]
    GenUnittests(GenArgs),
    /// Combine saved reports into a model × method summary table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitOptions {
    /// Neighbour rank K of the KNN detector (clamped to the train size).
    #[arg(long, default_value_t = fitstats::DEFAULT_KNN_K)]
    pub knn_k: usize,
    /// Train grouping for KL-matching reference vectors.
    #[arg(long, value_enum, default_value_t = KlGroupingArg::Predicted)]
    pub kl_grouping: KlGroupingArg,
    /// Override the ViM principal dimension D.
    #[arg(long)]
    pub vim_dim: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output state file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Previously fitted state; fitted on the fly when absent.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Comma-separated method ids (default: all applicable).
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Concept vectors (C' × d matrix file) for cosine and rcos.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    /// Fraction Q of ID-test samples accepted at the threshold.
    #[arg(long, default_value_t = DEFAULT_TPR_Q)]
    pub tpr_q: f64,
    /// A unit test fails when its FPR is strictly above this value.
    #[arg(long, default_value_t = DEFAULT_UNIT_FAIL_THRESHOLD)]
    pub unit_fail_threshold: f64,
    /// Model name recorded in reports (default: bundle directory name).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// `all` or a comma-separated list of recipe names.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub recipes: Vec<String>,
    #[arg(long, default_value_t = unitgen::DEFAULT_COUNT)]
    pub count: usize,
    #[arg(long, default_value_t = unitgen::DEFAULT_SIZE)]
    pub width: usize,
    #[arg(long, default_value_t = unitgen::DEFAULT_SIZE)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Source images for pixel_perm and smooth_pixel_perm.
    #[arg(long)]
    pub source_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Report JSON files or eval output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Md)]
    pub format: OutputFormat,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved, validated evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bundle_path: PathBuf,
    pub state_path: Option<PathBuf>,
    pub concepts_path: Option<PathBuf>,
    /// Empty means "all methods applicable to the bundle".
    pub methods: Vec<Method>,
    pub tpr_q: f64,
    pub unit_fail_threshold: f64,
    pub fit: FitConfig,
    pub model: Option<String>,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
}

impl RunConfig {
    pub fn new(bundle_path: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            bundle_path: bundle_path.into(),
            state_path: None,
            concepts_path: None,
            methods: Vec::new(),
            tpr_q: DEFAULT_TPR_Q,
            unit_fail_threshold: DEFAULT_UNIT_FAIL_THRESHOLD,
            fit: FitConfig::default(),
            model: None,
            out_dir: out_dir.into(),
            format: OutputFormat::Json,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tpr_q > 0.0 && self.tpr_q <= 1.0) {
            return Err(Error::Usage(format!("--tpr-q {} outside (0, 1]", self.tpr_q)));
        }
        if !(0.0..=1.0).contains(&self.unit_fail_threshold) {
            return Err(Error::Usage(format!(
                "--unit-fail-threshold {} outside [0, 1]",
                self.unit_fail_threshold
            )));
        }
        if self.fit.knn_k == 0 {
            return Err(Error::Usage("--knn-k must be at least 1".into()));
        }
        Ok(())
    }
}

fn fit_config(o: &FitOptions) -> FitConfig {
    FitConfig {
        knn_k: o.knn_k,
        kl_grouping: o.kl_grouping.into(),
        vim_dim: o.vim_dim,
    }
}

pub fn parse_methods(ids: &[String]) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for id in ids.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let m: Method = id.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

pub fn parse_recipes(names: &[String]) -> Result<Vec<Recipe>> {
    let names: Vec<&str> = names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() || names == ["all"] {
        return Ok(Recipe::ALL.to_vec());
    }
    let mut out: Vec<Recipe> = Vec::new();
    for n in names {
        let r: Recipe = n.parse()?;
        if !out.contains(&r) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Runs `f` on a pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Usage(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Thread cap from `OODEVAL_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn resolve_methods(requested: &[Method], bundle: &EvalBundle) -> Result<Vec<Method>> {
    if requested.is_empty() {
        return Ok(Method::ALL
            .into_iter()
            .filter(|m| bundle.has_features() || !m.needs_features())
            .collect());
    }
    if let Some(m) = requested.iter().find(|m| m.needs_features() && !bundle.has_features()) {
        return Err(Error::Usage(format!(
            "method '{m}' requires features, but the bundle is logits-only"
        )));
    }
    Ok(requested.to_vec())
}

fn load_or_fit(bundle: &EvalBundle, state_path: Option<&Path>, fit: &FitConfig) -> Result<FittedState> {
    let state = match state_path {
        Some(p) => FittedState::load(p)?,
        None => fitstats::fit(bundle, fit)?,
    };
    if state.num_classes != bundle.num_classes() || state.feature_dim() != bundle.feature_dim() {
        return Err(Error::Data(format!(
            "fitted state (C={}, d={:?}) does not match bundle (C={}, d={:?})",
            state.num_classes,
            state.feature_dim(),
            bundle.num_classes(),
            bundle.feature_dim()
        )));
    }
    Ok(state)
}

fn load_concepts(path: Option<&Path>) -> Result<Option<ndarray::Array2<f64>>> {
    path.map(|p| {
        crate::arraystore::read_matrix(p)?
            .to_f64()
            .ok_or_else(|| Error::Format {
                path: p.to_path_buf(),
                msg: "concept vectors must be an f32 matrix".into(),
            })
    })
    .transpose()
}

/// Human-readable fit summary printed by `fit`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub num_train: usize,
    pub num_classes: usize,
    pub feature_dim: Option<usize>,
    pub vim_dim: Option<usize>,
    pub vim_alpha: Option<f64>,
    pub react_r: Option<f64>,
    pub knn_k: Option<usize>,
}

impl std::fmt::Display for FitSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "N_train={} C={}", self.num_train, self.num_classes)?;
        match (self.feature_dim, self.vim_dim, self.vim_alpha) {
            (Some(d), Some(dim), Some(a)) => write!(
                f,
                " d={d} ViM D={dim} alpha={a:.6} ReAct r={:.6} KNN K={}",
                self.react_r.unwrap_or(f64::NAN),
                self.knn_k.unwrap_or(0)
            ),
            _ => write!(f, " (logits only)"),
        }
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitSummary> {
    let fit = fit_config(&args.fit);
    if fit.knn_k == 0 {
        return Err(Error::Usage("--knn-k must be at least 1".into()));
    }
    let bundle = load_bundle(&args.bundle)?;
    let state = fitstats::fit(&bundle, &fit)?;
    state.save(&args.out)?;
    let f = state.features.as_ref();
    Ok(FitSummary {
        num_train: bundle.id_train().set.len(),
        num_classes: state.num_classes,
        feature_dim: state.feature_dim(),
        vim_dim: f.map(|f| f.vim.principal_dim()),
        vim_alpha: f.map(|f| f.vim.alpha),
        react_r: f.map(|f| f.react_r),
        knn_k: f.map(|f| f.knn.k),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFileEntry {
    pub method: Method,
    pub set: String,
    pub n: usize,
    pub file: String,
}

pub const SCORES_MANIFEST: &str = "scores.json";

/// Writes one `n × 1` f32 matrix per (method, set) and a `scores.json` index.
pub fn cmd_score(args: &ScoreArgs) -> Result<Vec<ScoreFileEntry>> {
    let requested = parse_methods(&args.methods)?;
    let fit = fit_config(&args.fit);
    let bundle = load_bundle(&args.bundle)?;
    let methods = resolve_methods(&requested, &bundle)?;
    let state = load_or_fit(&bundle, args.state.as_deref(), &fit)?;
    let concepts = load_concepts(args.concepts.as_deref())?;

    let mut sets: Vec<(String, &crate::arraystore::SampleSet)> = vec![("id_test".into(), bundle.id_test())];
    sets.extend(bundle.ood_sets().iter().map(|(k, v)| (format!("ood/{k}"), v)));

    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    for m in &methods {
        for (i, (name, set)) in sets.iter().enumerate() {
            let sv = score_set(*m, name, set, &state, concepts.as_ref())?;
            let file = format!("{}_{i:04}.oodm", m.id());
            let values: Vec<f32> = sv.values.iter().map(|&v| v as f32).collect();
            let matrix = MatrixFile::from_f32(values.len(), 1, values)
                .map_err(|e| Error::Degenerate(format!("{m} on '{name}': {e}")))?;
            entries.push(ScoreFileEntry {
                method: *m,
                set: name.clone(),
                n: sv.values.len(),
                file: file.clone(),
            });
            outputs.push((file, matrix));
        }
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    for (file, matrix) in &outputs {
        write_matrix(args.out_dir.join(file), matrix)?;
    }
    write_text(
        &args.out_dir.join(SCORES_MANIFEST),
        &serde_json::to_string_pretty(&entries).expect("serializable"),
    )?;
    Ok(entries)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn default_model_name(bundle_path: &Path) -> String {
    bundle_path
        .canonicalize()
        .ok()
        .as_deref()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Scores every set and builds one report per method, without writing.
pub fn evaluate(config: &RunConfig) -> Result<Vec<EvalReport>> {
    config.validate()?;
    let bundle = load_bundle(&config.bundle_path)?;
    let methods = resolve_methods(&config.methods, &bundle)?;
    let (natural, unit): (Vec<_>, Vec<_>) = bundle
        .ood_sets()
        .iter()
        .partition(|(name, _)| !name.starts_with(UNITTEST_PREFIX));
    if natural.is_empty() {
        return Err(Error::Data(format!(
            "at least one OOD set without the '{UNITTEST_PREFIX}' prefix required"
        )));
    }
    let state = load_or_fit(&bundle, config.state_path.as_deref(), &config.fit)?;
    let concepts = load_concepts(config.concepts_path.as_deref())?;
    let model = config
        .model
        .clone()
        .unwrap_or_else(|| default_model_name(&config.bundle_path));

    methods
        .iter()
        .map(|&m| {
            let id = score_set(m, "id_test", bundle.id_test(), &state, concepts.as_ref())?.values;
            let score_all = |sets: &[(&String, &crate::arraystore::SampleSet)], strip: &str| {
                sets.iter()
                    .map(|(name, set)| {
                        let sv = score_set(m, name, set, &state, concepts.as_ref())?;
                        Ok((name[strip.len()..].to_string(), sv.values))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()
            };
            let mut report = metrics::per_class_report(m, &id, &score_all(&natural, "")?, config.tpr_q)?;
            if !unit.is_empty() {
                report.unit_tests = Some(metrics::unit_test_block(
                    report.threshold_tau,
                    &score_all(&unit, UNITTEST_PREFIX)?,
                    config.unit_fail_threshold,
                ));
            }
            report.model = Some(model.clone());
            Ok(report)
        })
        .collect()
}

pub fn report_file_name(m: Method) -> String {
    format!("report_{}.json", m.id())
}

/// Evaluates and writes `report_<method>.json` for each method plus a summary
/// (`summary.json|csv|md`); CSV output adds per-class and CDF tables.
pub fn cmd_eval(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let reports = evaluate(config)?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let dir = &config.out_dir;
    for r in &reports {
        files.push((
            dir.join(report_file_name(r.method)),
            serde_json::to_string_pretty(r).expect("serializable") + "\n",
        ));
        if config.format == OutputFormat::Csv {
            files.push((dir.join(format!("report_{}_classes.csv", r.method.id())), per_class_csv(r)?));
            files.push((dir.join(format!("report_{}_cdf.csv", r.method.id())), cdf_csv(r)?));
        }
    }
    let ext = match config.format {
        OutputFormat::Json => "json",
        OutputFormat::Csv => "csv",
        OutputFormat::Md => "md",
    };
    files.push((dir.join(format!("summary.{ext}")), render_summary(&reports, config.format)?));

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (path, text) in &files {
        write_text(path, text)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

fn csv_to_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 strings"))
}

pub fn per_class_csv(r: &EvalReport) -> Result<String> {
    let mut rows = vec![["class", "n", "fpr", "auroc", "aupr_s", "aupr_e"].map(String::from).to_vec()];
    for c in &r.per_class {
        rows.push(vec![
            c.class_name.clone(),
            c.n.to_string(),
            c.fpr_at_tpr.to_string(),
            c.auroc.to_string(),
            c.aupr_s.to_string(),
            c.aupr_e.to_string(),
        ]);
    }
    csv_to_string(rows)
}

pub fn cdf_csv(r: &EvalReport) -> Result<String> {
    let mut rows = vec![vec!["fpr".to_string(), "fraction_of_classes".to_string()]];
    rows.extend(r.cdf_points.iter().map(|p| vec![p.fpr.to_string(), p.fraction.to_string()]));
    csv_to_string(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub method: Method,
    pub mean_fpr: f64,
    pub mean_auroc: f64,
    pub mean_aupr_s: f64,
    pub mean_aupr_e: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_unit_tests: Option<usize>,
}

fn summary_rows(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = reports
        .iter()
        .map(|r| SummaryRow {
            model: r.model.clone().unwrap_or_else(|| "model".into()),
            method: r.method,
            mean_fpr: r.mean_fpr,
            mean_auroc: r.mean_auroc,
            mean_aupr_s: r.mean_aupr_s,
            mean_aupr_e: r.mean_aupr_e,
            failed_unit_tests: r.unit_tests.as_ref().map(|u| u.failed),
        })
        .collect();
    rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.method.cmp(&b.method)));
    rows
}

/// Summary over reports. The Markdown form is a model × method grid of mean
/// FPR in percent; for every method other than MSP the signed difference to
/// the same model's MSP value follows in brackets (negative is better).
pub fn render_summary(reports: &[EvalReport], format: OutputFormat) -> Result<String> {
    let rows = summary_rows(reports);
    match format {
        OutputFormat::Json => Ok(serde_json::to_string_pretty(&rows).expect("serializable") + "\n"),
        OutputFormat::Csv => {
            let mut table = vec![[
                "model",
                "method",
                "mean_fpr",
                "mean_auroc",
                "mean_aupr_s",
                "mean_aupr_e",
                "failed_unit_tests",
            ]
            .map(String::from)
            .to_vec()];
            for r in &rows {
                table.push(vec![
                    r.model.clone(),
                    r.method.id().to_string(),
                    r.mean_fpr.to_string(),
                    r.mean_auroc.to_string(),
                    r.mean_aupr_s.to_string(),
                    r.mean_aupr_e.to_string(),
                    r.failed_unit_tests.map(|n| n.to_string()).unwrap_or_default(),
                ]);
            }
            csv_to_string(table)
        }
        OutputFormat::Md => Ok(markdown_grid(&rows)),
    }
}

fn markdown_grid(rows: &[SummaryRow]) -> String {
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| rows.iter().any(|r| r.method == *m))
        .collect();
    let models: Vec<&str> = {
        let mut v: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
        v.dedup();
        v
    };
    let cell = |model: &str, m: Method| rows.iter().find(|r| r.model == model && r.method == m);
    let has_units = rows.iter().any(|r| r.failed_unit_tests.is_some());

    let mut out = String::new();
    out.push_str("Mean FPR@TPR (%), lower is better. Brackets: difference to MSP of the same model.\n\n");
    let _ = write!(out, "| Model |");
    for m in &methods {
        let _ = write!(out, " {} |", m.label());
    }
    out.push('\n');
    out.push_str("|---|");
    out.push_str(&"---:|".repeat(methods.len()));
    out.push('\n');
    for model in &models {
        let msp = cell(model, Method::Msp).map(|r| 100.0 * r.mean_fpr);
        let _ = write!(out, "| {model} |");
        for &m in &methods {
            match cell(model, m) {
                Some(r) => {
                    let v = 100.0 * r.mean_fpr;
                    match msp {
                        Some(base) if m != Method::Msp => {
                            let _ = write!(out, " {v:.1} ({:+.1}) |", v - base);
                        }
                        _ => {
                            let _ = write!(out, " {v:.1} |");
                        }
                    }
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    if has_units {
        out.push_str("\nFailed unit tests.\n\n| Model |");
        for m in &methods {
            let _ = write!(out, " {} |", m.label());
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(methods.len()));
        out.push('\n');
        for model in &models {
            let _ = write!(out, "| {model} |");
            for &m in &methods {
                match cell(model, m).and_then(|r| r.failed_unit_tests) {
                    Some(n) => {
                        let _ = write!(out, " {n} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Loads `report_*.json` files given directly or found in directories.
pub fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut paths = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            paths.extend(found);
        } else {
            paths.push(p.clone());
        }
    }
    if paths.is_empty() {
        return Err(Error::Data("no report files found".into()));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(p, format!("not an eval report: {e}")))
        })
        .collect()
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let reports = collect_reports(&args.inputs)?;
    let text = render_summary(&reports, args.format)?;
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(text)
}

/// Generates every requested suite into `<out_dir>/<recipe>/`.
pub fn cmd_gen_unittests(args: &GenArgs) -> Result<Vec<SuiteManifest>> {
    let recipes = parse_recipes(&args.recipes)?;
    let specs: Vec<RecipeSpec> = recipes
        .iter()
        .map(|&recipe| RecipeSpec {
            recipe,
            width: args.width,
            height: args.height,
            count: args.count,
            base_seed: args.seed,
            source_dir: args.source_dir.clone(),
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    if let Some(dir) = args.source_dir.as_deref().filter(|_| recipes.iter().any(|r| r.needs_sources())) {
        unitgen::SourcePool::open(dir)?;
    }
    specs
        .iter()
        .map(|s| unitgen::generate_suite(s, &args.out_dir.join(s.recipe.name())))
        .collect()
}

/// Executes a parsed command line and returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Fit(a) => Ok(format!("{}\n", cmd_fit(&a)?)),
        Command::Score(a) => {
            let entries = cmd_score(&a)?;
            Ok(format!("wrote {} score files to {}\n", entries.len(), a.out_dir.display()))
        }
        Command::Eval(a) => {
            let config = RunConfig {
                bundle_path: a.bundle,
                state_path: a.state,
                concepts_path: a.concepts,
                methods: parse_methods(&a.methods)?,
                tpr_q: a.tpr_q,
                unit_fail_threshold: a.unit_fail_threshold,
                fit: fit_config(&a.fit),
                model: a.model,
                out_dir: a.out_dir,
                format: a.format,
            };
            let files = cmd_eval(&config)?;
            let mut s = String::new();
            for f in files {
                let _ = writeln!(s, "{}", f.display());
            }
            Ok(s)
        }
        Command::GenUnittests(a) => {
            let manifests = cmd_gen_unittests(&a)?;
            let mut s = String::new();
            for m in manifests {
                let _ = writeln!(s, "{}: {} images", m.recipe, m.files.len());
            }
            Ok(s)
        }
        Command::Report(a) => {
            let text = cmd_report(&a)?;
            Ok(if a.out.is_some() { String::new() } else { text })
        }
    }
}
