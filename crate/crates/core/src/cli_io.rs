//! File formats, run configuration and the commands behind the `glfm` binary.
//!
//! Responses are a CSV with one named column per item and one row per
//! subject; empty cells and `NA` are missing. Covariates are a CSV with one
//! named column per covariate (the intercept is added automatically). An
//! optional families CSV has columns `item,family[,sigma2]`.
//!
//! Configuration is one JSON document ([`RunConfig`]); command-line flags
//! override its fields. Every run writes `manifest.json`, which is itself a
//! valid configuration that reproduces the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::estimation::FitConfig;
use crate::identification::{check_condition1_minimal_l1, fit_canonical, CanonicalFit};
use crate::inference::{group_chisq_test, infer, InferenceReport};
use crate::model::{Dataset, LinkFamily};
use crate::par::with_threads;
use crate::simulation::{run_study, SimConfig, StudyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 4;

/// A dataset together with its item and covariate names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedDataset {
    pub data: Dataset,
    pub items: Vec<String>,
    /// Covariate names without the intercept.
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    /// Item names.
    pub items: Vec<String>,
    /// Covariate name.
    pub covariate: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// One run. Field values come from the JSON config file and are then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub responses: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub families: Option<PathBuf>,
    /// Family of items not listed in `families`.
    pub family: String,
    pub out: Option<PathBuf>,
    pub level: f64,
    pub formats: Vec<Format>,
    pub fit: FitConfig,
    pub groups: Vec<GroupSpec>,
    pub preset: Option<String>,
    pub simulation: Option<SimConfig>,
    /// Saved `fit.json` for `test` and `check-id`.
    pub fit_path: Option<PathBuf>,
    pub loadings: Option<PathBuf>,
    pub coefficients: Option<PathBuf>,
    pub check_directions: usize,
    /// Worker threads (0 = all cores).
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            responses: None,
            covariates: None,
            families: None,
            family: "logistic".into(),
            out: None,
            level: 0.95,
            formats: vec![Format::Json, Format::Csv],
            fit: FitConfig::default(),
            groups: Vec::new(),
            preset: None,
            simulation: None,
            fit_path: None,
            loadings: None,
            coefficients: None,
            check_directions: 64,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        for p in [&self.responses, &self.covariates, &self.families, &self.fit_path, &self.loadings, &self.coefficients]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if let Some(out) = &self.out {
            if !out.is_dir() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("output directory {} does not exist", out.display()),
                )));
            }
        }
        LinkFamily::parse(&self.family)?;
        self.fit.validate()
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

/// Reads a numeric CSV with a header. Returns names, values and the
/// observed mask; `allow_missing = false` rejects empty and NA cells.
fn read_numeric_csv(path: &Path, allow_missing: bool) -> Result<(Vec<String>, DMatrix<f64>, DMatrix<bool>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let names: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        if record.len() != names.len() {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", names.len(), record.len())));
        }
        for (c, field) in record.iter().enumerate() {
            if is_missing(field) {
                if !allow_missing {
                    return Err(parse_err(path, line, format!("missing value in column '{}'", names[c])));
                }
                values.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("non-numeric value '{}' in column '{}'", field, names[c])))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("non-finite value in column '{}'", names[c])));
                }
                values.push(v);
                mask.push(true);
            }
        }
        rows += 1;
    }
    let cols = names.len();
    Ok((
        names,
        DMatrix::from_row_slice(rows, cols, &values),
        DMatrix::from_row_slice(rows, cols, &mask),
    ))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Csv(e),
        _ => parse_err(path, line, e.to_string()),
    }
}

fn read_families(path: &Path, items: &[String], default: LinkFamily) -> Result<Vec<LinkFamily>> {
    let mut map = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path).map_err(|e| csv_err(path, e))?;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let item = record.get(0).unwrap_or("").trim().to_string();
        let spec = record.get(1).ok_or_else(|| parse_err(path, line, "expected item,family"))?.trim();
        let mut fam = LinkFamily::parse(spec).map_err(|e| parse_err(path, line, e.to_string()))?;
        if let Some(s2) = record.get(2).filter(|s| !s.trim().is_empty()) {
            let v: f64 = s2.trim().parse().map_err(|_| parse_err(path, line, format!("bad sigma2 '{s2}'")))?;
            fam = LinkFamily::gaussian(v).map_err(|e| parse_err(path, line, e.to_string()))?;
        }
        if !items.contains(&item) {
            return Err(parse_err(path, line, format!("unknown item '{item}'")));
        }
        map.insert(item, fam);
    }
    Ok(items.iter().map(|it| map.get(it).copied().unwrap_or(default)).collect())
}

/// Loads responses, optional covariates and optional per-item families.
pub fn load_dataset(
    responses: &Path,
    covariates: Option<&Path>,
    families: Option<&Path>,
    default_family: LinkFamily,
) -> Result<NamedDataset> {
    let (items, y, mask) = read_numeric_csv(responses, true)?;
    let n = y.nrows();
    if n == 0 || items.is_empty() {
        return Err(parse_err(responses, 1, "no responses"));
    }
    for i in 0..n {
        if !mask.row(i).iter().any(|&m| m) {
            return Err(parse_err(responses, i + 2, "subject has no observed responses"));
        }
    }
    for (j, name) in items.iter().enumerate() {
        if !mask.column(j).iter().any(|&m| m) {
            return Err(parse_err(responses, 1, format!("item '{name}' has no observed responses")));
        }
    }
    let (cov_names, xc) = match covariates {
        Some(path) => {
            let (names, xc, _) = read_numeric_csv(path, false)?;
            if xc.nrows() != n {
                return Err(parse_err(path, xc.nrows() + 1, format!("{} covariate rows for {n} subjects", xc.nrows())));
            }
            (names, xc)
        }
        None => (Vec::new(), DMatrix::zeros(n, 0)),
    };
    let mut x = DMatrix::from_element(n, cov_names.len() + 1, 1.0);
    x.columns_mut(1, cov_names.len()).copy_from(&xc);
    let fams = match families {
        Some(path) => read_families(path, &items, default_family)?,
        None => vec![default_family; items.len()],
    };
    let data = Dataset::new(y, mask, x, fams)?;
    Ok(NamedDataset { data, items, covariates: cov_names })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

/// Writes responses (NA for missing cells) and covariates (without the intercept).
pub fn write_dataset(named: &NamedDataset, responses: &Path, covariates: Option<&Path>) -> Result<()> {
    let data = &named.data;
    let mut w = csv::Writer::from_path(responses)?;
    w.write_record(&named.items)?;
    for i in 0..data.n() {
        w.write_record((0..data.q()).map(|j| if data.mask()[(i, j)] { fmt(data.y()[(i, j)]) } else { "NA".into() }))?;
    }
    w.flush()?;
    if let Some(path) = covariates {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&named.covariates)?;
        for i in 0..data.n() {
            w.write_record((1..data.p()).map(|s| fmt(data.x()[(i, s)])))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (names, m, _) = read_numeric_csv(path, false)?;
    Ok((names, m))
}

/// Files written by one command.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Some items had no usable covariance.
    pub partial: bool,
}

fn covariate_labels(named: &NamedDataset) -> Vec<String> {
    std::iter::once("intercept".to_string()).chain(named.covariates.iter().cloned()).collect()
}

fn estimates_json(canon: &CanonicalFit, named: &NamedDataset) -> Value {
    json!({
        "items": named.items,
        "covariates": covariate_labels(named),
        "factors": canon.k(),
        "gamma": rows(&canon.gamma_star),
        "u": rows(&canon.u_star),
        "b": rows(&canon.b_star),
    })
}

fn diagnostics_json(canon: &CanonicalFit, report: &InferenceReport, named: &NamedDataset) -> Value {
    json!({
        "objective": canon.raw.objective,
        "objective_trace": canon.raw.objective_trace,
        "n_iter": canon.raw.n_iter,
        "converged": canon.raw.converged,
        "start_index": canon.raw.start_index,
        "start_objectives": canon.raw.start_objectives,
        "refine_rounds_done": canon.refine_rounds_done,
        "eigenvalues": canon.transform.eigenvalues,
        "condition_report": canon.condition_report,
        "ortho_route_gap": canon.ortho_route_gap,
        "warnings": canon.warnings,
        "unavailable_items": report.unavailable_items.iter()
            .map(|(j, why)| json!({"item": named.items[*j], "reason": why}))
            .collect::<Vec<_>>(),
    })
}

fn write_inference_csv(path: &Path, report: &InferenceReport, named: &NamedDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item", "covariate", "estimate", "se", "z", "p", "p_bonf", "ci_lo", "ci_hi", "n_observed"])?;
    for (j, item) in named.items.iter().enumerate() {
        for (s, cov) in named.covariates.iter().enumerate() {
            w.write_record([
                item.clone(),
                cov.clone(),
                fmt(report.estimate[(j, s)]),
                fmt(report.se[(j, s)]),
                fmt(report.z[(j, s)]),
                fmt(report.pvalues[(j, s)]),
                fmt(report.pvalues_bonferroni[(j, s)]),
                fmt(report.ci_lower[(j, s)]),
                fmt(report.ci_upper[(j, s)]),
                report.n_observed[j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn default_groups(named: &NamedDataset) -> Vec<GroupSpec> {
    named
        .covariates
        .iter()
        .map(|c| GroupSpec { name: "all".into(), items: named.items.clone(), covariate: c.clone() })
        .collect()
}

fn write_group_csv(path: &Path, groups: &[GroupSpec], report: &InferenceReport, named: &NamedDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "covariate", "statistic", "df", "p", "n_items_skipped"])?;
    for g in groups {
        let s = named
            .covariates
            .iter()
            .position(|c| *c == g.covariate)
            .ok_or_else(|| Error::Config(format!("group '{}': unknown covariate '{}'", g.name, g.covariate)))?
            + 1;
        let mut idx = Vec::new();
        for it in &g.items {
            let j = named
                .items
                .iter()
                .position(|x| x == it)
                .ok_or_else(|| Error::Config(format!("group '{}': unknown item '{it}'", g.name)))?;
            idx.push(j);
        }
        let usable: Vec<usize> = idx.iter().copied().filter(|&j| report.z[(j, s - 1)].is_finite()).collect();
        let skipped = idx.len() - usable.len();
        match group_chisq_test(&usable, s, report) {
            Ok(t) => w.write_record([g.name.clone(), g.covariate.clone(), fmt(t.statistic), t.df.to_string(), fmt(t.pvalue), skipped.to_string()])?,
            Err(_) => w.write_record([g.name.clone(), g.covariate.clone(), "NA".into(), "0".into(), "NA".into(), skipped.to_string()])?,
        }
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, files: &[PathBuf]) -> Result<PathBuf> {
    let mut value = serde_json::to_value(RunConfig { command: Some(command.into()), ..cfg.clone() })?;
    let outputs: Vec<String> = files.iter().filter_map(|f| f.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    if let Value::Object(map) = &mut value {
        map.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        map.insert("outputs".into(), json!(outputs));
    }
    let path = dir.join("manifest.json");
    write_json(&path, &value)?;
    Ok(path)
}

fn load_from_config(cfg: &RunConfig) -> Result<NamedDataset> {
    let responses = cfg.responses.as_deref().ok_or_else(|| Error::Config("--responses is required".into()))?;
    load_dataset(responses, cfg.covariates.as_deref(), cfg.families.as_deref(), LinkFamily::parse(&cfg.family)?)
}

fn emit_inference(
    cfg: &RunConfig,
    dir: &Path,
    canon: &CanonicalFit,
    named: &NamedDataset,
    files: &mut Vec<PathBuf>,
) -> Result<InferenceReport> {
    let report = infer(canon, &named.data, cfg.level, cfg.fit.execution)?;
    if cfg.wants(Format::Csv) {
        let p = dir.join("inference.csv");
        write_inference_csv(&p, &report, named)?;
        files.push(p);
        let groups = if cfg.groups.is_empty() { default_groups(named) } else { cfg.groups.clone() };
        let p = dir.join("group_tests.csv");
        write_group_csv(&p, &groups, &report, named)?;
        files.push(p);
    }
    if cfg.wants(Format::Json) {
        let p = dir.join("diagnostics.json");
        write_json(&p, &diagnostics_json(canon, &report, named))?;
        files.push(p);
    }
    Ok(report)
}

/// load → fit → canonicalize → infer → write bundle.
pub fn cmd_fit(cfg: &RunConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let dir = cfg.out_dir()?.to_path_buf();
    let named = load_from_config(cfg)?;
    let canon = fit_canonical(&named.data, &cfg.fit)?;
    let mut files = Vec::new();
    let p = dir.join("fit.json");
    write_json(&p, &canon)?;
    files.push(p);
    if cfg.wants(Format::Json) {
        let p = dir.join("estimates.json");
        write_json(&p, &estimates_json(&canon, &named))?;
        files.push(p);
    }
    let report = emit_inference(cfg, &dir, &canon, &named, &mut files)?;
    files.push(write_manifest(&dir, cfg, "fit", &files)?);
    Ok(ReportBundle { dir, files, partial: report.is_partial() })
}

pub fn load_fit(path: &Path) -> Result<CanonicalFit> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), line: e.line(), msg: e.to_string() })
}

/// Inference on a saved fit.
pub fn cmd_test(cfg: &RunConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let dir = cfg.out_dir()?.to_path_buf();
    let fit_path = cfg.fit_path.as_deref().ok_or_else(|| Error::Config("--fit is required".into()))?;
    let canon = load_fit(fit_path)?;
    let named = load_from_config(cfg)?;
    canon.params().check_against(&named.data)?;
    let mut files = Vec::new();
    let report = emit_inference(cfg, &dir, &canon, &named, &mut files)?;
    files.push(write_manifest(&dir, cfg, "test", &files)?);
    Ok(ReportBundle { dir, files, partial: report.is_partial() })
}

/// Resolves the study configuration: preset, then the `simulation` section, then flags.
pub fn sim_config(cfg: &RunConfig) -> Result<SimConfig> {
    let mut sim = match (&cfg.simulation, &cfg.preset) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => SimConfig::preset(p)?,
        (None, None) => return Err(Error::Config("simulate needs --preset or a 'simulation' section".into())),
    };
    sim.fit.execution = cfg.fit.execution;
    Ok(sim)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(ReportBundle, StudyReport)> {
    cfg.validate()?;
    let dir = cfg.out_dir()?.to_path_buf();
    let sim = sim_config(cfg)?;
    let study = run_study(&sim)?;
    let mut files = Vec::new();
    let p = dir.join("study.json");
    write_json(&p, &study)?;
    files.push(p);
    let p = dir.join("study_reps.csv");
    study.write_csv(File::create(&p)?)?;
    files.push(p);
    let echo = RunConfig { simulation: Some(sim), ..cfg.clone() };
    files.push(write_manifest(&dir, &echo, "simulate", &files)?);
    Ok((ReportBundle { dir, files, partial: false }, study))
}

/// Verdict of the minimal-ℓ1 condition per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub covariate: String,
    pub verdict: String,
}

pub fn cmd_check_id(cfg: &RunConfig) -> Result<Vec<CheckRow>> {
    cfg.validate()?;
    let (gamma, b, names) = match (&cfg.fit_path, &cfg.loadings, &cfg.coefficients) {
        (Some(path), _, _) => {
            let canon = load_fit(path)?;
            let names = (1..canon.b_star.ncols()).map(|s| format!("x{s}")).collect();
            (canon.gamma_star, canon.b_star, names)
        }
        (None, Some(lp), Some(cp)) => {
            let (_, gamma) = read_matrix_csv(lp)?;
            let (names, bc) = read_matrix_csv(cp)?;
            if gamma.nrows() != bc.nrows() {
                return Err(Error::Dimension(format!("{} loading rows, {} coefficient rows", gamma.nrows(), bc.nrows())));
            }
            let mut b = DMatrix::zeros(bc.nrows(), bc.ncols() + 1);
            b.columns_mut(1, bc.ncols()).copy_from(&bc);
            (gamma, b, names)
        }
        _ => return Err(Error::Config("check-id needs --fit or both --loadings and --coefficients".into())),
    };
    let directions = cfg.check_directions.max(2 * gamma.ncols());
    let verdicts = check_condition1_minimal_l1(&gamma, &b, directions, cfg.fit.seed)?;
    let out: Vec<CheckRow> = names
        .into_iter()
        .zip(verdicts)
        .map(|(covariate, v)| CheckRow { covariate, verdict: v.label().into() })
        .collect();
    if let Some(dir) = &cfg.out {
        let mut w = csv::Writer::from_path(dir.join("check_id.csv"))?;
        w.write_record(["covariate", "verdict"])?;
        for r in &out {
            w.write_record([&r.covariate, &r.verdict])?;
        }
        w.flush()?;
        write_manifest(dir, cfg, "check-id", &[dir.join("check_id.csv")])?;
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "glfm", version, about = "Covariate-adjusted generalized latent factor models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit, canonicalize and run inference.
    Fit(Flags),
    /// Inference on a saved fit.
    Test(Flags),
    /// Replicated simulation study.
    Simulate(Flags),
    /// Check the minimal-ℓ1 identification condition.
    CheckId(Flags),
}

#[derive(Debug, Args, Default)]
pub struct Flags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub families: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub loadings: Option<PathBuf>,
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
}

impl Flags {
    /// Config file values overridden by flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = &self.$flag {
                    $field = Some(v.clone());
                }
            };
        }
        set!(responses => cfg.responses);
        set!(covariates => cfg.covariates);
        set!(families => cfg.families);
        set!(out => cfg.out);
        set!(preset => cfg.preset);
        set!(fit => cfg.fit_path);
        set!(loadings => cfg.loadings);
        set!(coefficients => cfg.coefficients);
        if let Some(k) = self.k {
            cfg.fit.k = k;
        }
        if let Some(f) = &self.family {
            cfg.family = f.clone();
        }
        if let Some(l) = self.level {
            cfg.level = l;
        }
        if let Some(s) = self.seed {
            cfg.fit.seed = s;
            if let Some(sim) = &mut cfg.simulation {
                sim.seed = s;
            }
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if self.preset.is_some() && self.config.is_none() {
            cfg.simulation = None;
        }
        if let (Some(p), Some(s)) = (&self.preset, self.seed) {
            let mut sim = SimConfig::preset(p)?;
            sim.seed = s;
            cfg.simulation = Some(sim);
        }
        Ok(cfg)
    }
}

fn print_table(rows: &[CheckRow]) {
    println!("covariate,verdict");
    for r in rows {
        println!("{},{}", r.covariate, r.verdict);
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, flags) = match &cli.command {
        Command::Fit(f) => ("fit", f),
        Command::Test(f) => ("test", f),
        Command::Simulate(f) => ("simulate", f),
        Command::CheckId(f) => ("check-id", f),
    };
    let outcome = flags.resolve().and_then(|cfg| {
        with_threads(cfg.threads, || -> Result<i32> {
            match name {
                "fit" => cmd_fit(&cfg).map(|b| if b.partial { EXIT_PARTIAL } else { EXIT_OK }),
                "test" => cmd_test(&cfg).map(|b| if b.partial { EXIT_PARTIAL } else { EXIT_OK }),
                "simulate" => cmd_simulate(&cfg).map(|(_, s)| {
                    println!(
                        "type1_mean={} power_mean={} coverage_mean={} failures={}",
                        s.type1_mean.map_or("NA".into(), |v| v.to_string()),
                        s.power_mean.map_or("NA".into(), |v| v.to_string()),
                        s.coverage_mean.map_or("NA".into(), |v| v.to_string()),
                        s.failures
                    );
                    EXIT_OK
                }),
                _ => cmd_check_id(&cfg).map(|rows| {
                    print_table(&rows);
                    EXIT_OK
                }),
            }
        })
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
