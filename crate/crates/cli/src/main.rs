//! `synthctl` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 computation failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synthctl::donors::{
    self, cluster_pool_or_fallback, filter_by_neighbor_states, select_predictors_naive, ClusterMap, CorrMatrix,
};
use synthctl::engine::{fit_synth, StudySpec, TrainPlacement, VMode};
use synthctl::inference::{p_value, placebo_run, training_sweep, PlaceboOptions};
use synthctl::logistic::{classify_quadrant, decile_summary, fit_many, theme_regression, LogisticOptions};
use synthctl::panel::{
    self, clean_series, interpolate_missing, CleanOutcome, CleaningPolicy, Panel, PredictorTable, RepairMode,
    UnitId, UnitMeta,
};
use synthctl::report;
use synthctl::weights::{ConstraintMode, Regularization};
use synthctl::Error;

#[derive(Parser)]
#[command(name = "synthctl", version, about = "Synthetic control studies and logistic growth fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one synthetic control; writes result.json and curve.csv.
    #[command(args_override_self = true)]
    Fit(StudyArgs),
    /// Placebo ensemble and p-value; writes placebo.json and pvalues.csv.
    #[command(args_override_self = true)]
    Placebo(StudyArgs),
    /// Training-length sweep over --t-fit values; writes sweep.csv.
    #[command(args_override_self = true)]
    Sweep(StudyArgs),
    /// Logistic growth fits; writes fits.csv, fit_failures.csv, ccvi_regression.csv and deciles.csv.
    #[command(args_override_self = true)]
    Logistic(LogisticArgs),
    /// Pick weakly correlated predictors per block; writes selected_predictors.csv.
    #[command(name = "select-predictors", args_override_self = true)]
    SelectPredictors(SelectArgs),
    /// Clean raw daily series; writes cleaned.csv and dropped.csv.
    #[command(args_override_self = true)]
    Ingest(IngestArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// key=value file supplying defaults for any long flag; flags on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolFilter {
    None,
    Cluster,
    Neighbors,
}

#[derive(Args, Clone)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    /// Long-format outcome CSV (unit,date,value).
    #[arg(long)]
    outcomes: PathBuf,
    /// Predictor CSV (unit,<predictor>...). Without it only the outcome mean is used.
    #[arg(long)]
    predictors: Option<PathBuf>,
    /// Unit metadata CSV (unit,treated,t0,cluster,incentive_category).
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Cluster assignment CSV (fips,cluster).
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// State adjacency CSV (state,neighbor), used by --filter neighbors.
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// Predictor blocks CSV (block,predictor); restricts predictors to a naive selection.
    #[arg(long)]
    blocks: Option<PathBuf>,
    #[arg(long)]
    treated: String,
    /// First post-intervention date; defaults to the treated unit's metadata t0.
    #[arg(long)]
    t0: Option<String>,
    /// Training window length in days; a comma list for `sweep`.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    t_fit: Vec<usize>,
    #[arg(long, default_value_t = 0.6)]
    l1: f64,
    #[arg(long, default_value_t = 0.1)]
    l2: f64,
    /// optimized, inverse_variance or fixed:v1,v2,...
    #[arg(long, default_value = "optimized")]
    v_mode: String,
    #[arg(long, default_value = "tail")]
    train_placement: String,
    /// simplex or penalized.
    #[arg(long, default_value = "simplex")]
    constraint: String,
    /// Intervention date applied to every placebo unit; defaults to the treated unit's.
    #[arg(long)]
    placebo_t0: Option<String>,
    #[arg(long, value_enum, default_value_t = PoolFilter::None)]
    filter: PoolFilter,
    /// Skip z-scoring of predictors.
    #[arg(long)]
    no_standardize: bool,
    /// Zero small weights and re-solve.
    #[arg(long)]
    sparsify: bool,
}

#[derive(Args, Clone)]
struct LogisticArgs {
    #[command(flatten)]
    common: Common,
    /// Long-format cumulative rate CSV (unit,date,value) in percent.
    #[arg(long)]
    outcomes: PathBuf,
    /// Per-unit index columns (themes and overall index) to regress on.
    #[arg(long)]
    predictors: Option<PathBuf>,
    /// Number of equal-count bins for the binned summaries.
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

#[derive(Args, Clone)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    predictors: PathBuf,
    #[arg(long)]
    blocks: PathBuf,
    /// Correlation above which a candidate is discarded.
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
    #[arg(long, default_value_t = 2)]
    per_block: usize,
}

#[derive(Args, Clone)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    outcomes: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    max_bad_fraction: f64,
    #[arg(long, default_value_t = 7)]
    window: usize,
    /// interpolate, cummax or both.
    #[arg(long, default_value = "both")]
    repair: String,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
    fn compute(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence(_)
            | Error::DegenerateSeries(_)
            | Error::ZeroVariance(_)
            | Error::ZeroVariancePredictor(_)
            | Error::ZeroPreRmse => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(f) => return report_failure(f),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Placebo(a) => cmd_placebo(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Logistic(a) => cmd_logistic(&a),
        Command::SelectPredictors(a) => cmd_select(&a),
        Command::Ingest(a) => cmd_ingest(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(f),
    }
}

fn report_failure(f: Failure) -> ExitCode {
    eprintln!("error: {}", f.message);
    ExitCode::from(f.code)
}

/// Splices `key=value` lines from a `--config` file in front of the command
/// line flags, so later (command line) occurrences override them.
fn expand_config(args: Vec<String>) -> CliResult<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args.get(pos + 1).cloned().ok_or_else(|| Failure::config("--config needs a path"))?,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::config(format!("{path}: {e}")))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("{path}:{}: expected key=value", n + 1)))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => injected.push(flag),
            "false" => {}
            v => {
                injected.push(flag);
                injected.push(v.to_string());
            }
        }
    }
    // Insert right after the subcommand name.
    let at = 2.min(args.len());
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::config(format!("{what} file not found: {}", path.display())))
    }
}

fn out_file(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn parallelism(common: &Common) -> usize {
    common.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

/// Everything a study command needs, resolved from flags and files.
struct Study {
    spec: StudySpec,
    panel: Panel,
    predictors: PredictorTable,
    placebo_pre_len: Option<usize>,
}

fn load_study(a: &StudyArgs) -> CliResult<Study> {
    require_file(&a.outcomes, "outcome")?;
    for (p, what) in [
        (&a.predictors, "predictor"),
        (&a.metadata, "metadata"),
        (&a.clusters, "cluster"),
        (&a.adjacency, "adjacency"),
        (&a.blocks, "blocks"),
    ] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    let mut panel = panel::read_panel(&a.outcomes)?;
    let treated = UnitId::new(a.treated.as_str())?;
    if panel.index_of(&treated).is_none() {
        return Err(Failure::config(format!("treated unit {treated} is not in {}", a.outcomes.display())));
    }
    let meta: BTreeMap<UnitId, UnitMeta> = match &a.metadata {
        Some(p) => panel::read_metadata(p)?,
        None => BTreeMap::new(),
    };
    panel.set_meta(&meta)?;

    let predictors = match &a.predictors {
        Some(p) => {
            let table = panel::read_predictors(p)?;
            match &a.blocks {
                Some(b) => {
                    let blocks = donors::read_blocks(b)?;
                    let corr = CorrMatrix::from_table(&table)?;
                    let sel = select_predictors_naive(&corr, &blocks, 0.4, 2)?;
                    table.select(&sel.names())?
                }
                None => table,
            }
        }
        None => PredictorTable::empty(panel.units().to_vec()),
    };

    // Donors: units with predictors, not flagged as treated, other than the treated unit.
    let mut candidates: Vec<UnitId> = panel
        .units()
        .iter()
        .filter(|u| **u != treated && !meta.get(*u).is_some_and(|m| m.treated))
        .filter(|u| predictors.row(u).is_ok())
        .cloned()
        .collect();
    candidates = match a.filter {
        PoolFilter::None => candidates,
        PoolFilter::Cluster => {
            let clusters = match &a.clusters {
                Some(p) => donors::read_clusters(p)?,
                None => ClusterMap::from_meta(&meta)?,
            };
            let (pool, fell_back) = cluster_pool_or_fallback(&treated, &candidates, &clusters)?;
            if fell_back {
                eprintln!("warning: no donor shares the cluster of {treated}; using all donors");
            }
            pool
        }
        PoolFilter::Neighbors => {
            let path = a.adjacency.as_ref().ok_or_else(|| Failure::config("--filter neighbors needs --adjacency"))?;
            filter_by_neighbor_states(&treated, &candidates, &donors::read_adjacency(path)?)?
        }
    };
    if candidates.is_empty() {
        return Err(Failure::config("the donor pool is empty"));
    }

    let t0 = match (&a.t0, meta.get(&treated).and_then(|m| m.t0)) {
        (Some(s), _) => panel::parse_date(s)?,
        (None, Some(d)) => d,
        (None, None) => return Err(Failure::config("no --t0 given and no t0 in metadata for the treated unit")),
    };
    let pre_len = StudySpec::pre_len_for(&panel, t0)?;
    let placebo_pre_len = match &a.placebo_t0 {
        Some(s) => Some(StudySpec::pre_len_for(&panel, panel::parse_date(s)?)?),
        None => None,
    };

    let mut spec = StudySpec::new(treated, candidates, pre_len);
    spec.t_fit = *a.t_fit.first().ok_or_else(|| Failure::config("--t-fit needs a value"))?;
    spec.reg = Regularization { l1: a.l1, l2: a.l2 };
    spec.reg.validate()?;
    spec.v_mode = a.v_mode.parse::<VMode>()?;
    spec.train_placement = a.train_placement.parse::<TrainPlacement>()?;
    spec.solver.constraint_mode = a.constraint.parse::<ConstraintMode>()?;
    spec.solver.seed = a.common.seed;
    spec.standardize = !a.no_standardize;
    spec.sparsify = a.sparsify;
    spec.validate(&panel)?;
    Ok(Study { spec, panel, predictors, placebo_pre_len })
}

fn cmd_fit(a: &StudyArgs) -> CliResult<()> {
    let s = load_study(a)?;
    let fit = fit_synth(&s.spec, &s.panel, &s.predictors)?;
    if !fit.converged {
        log::warn!("weight solver stopped at its iteration limit");
    }
    report::write_synth_json(&fit, out_file(&a.common.out, "result.json")?)?;
    report::write_curve_csv(&fit, out_file(&a.common.out, "curve.csv")?)?;
    Ok(())
}

fn placebo_options(a: &StudyArgs, s: &Study) -> PlaceboOptions {
    PlaceboOptions { parallelism: parallelism(&a.common), placebo_pre_len: s.placebo_pre_len }
}

fn cmd_placebo(a: &StudyArgs) -> CliResult<()> {
    let s = load_study(a)?;
    let ensemble = placebo_run(&s.spec, &s.panel, &s.predictors, &placebo_options(a, &s))?;
    let skipped = ensemble.entries.len() - ensemble.n_valid();
    if skipped > 0 {
        eprintln!("warning: {skipped} placebo fits failed and were skipped");
    }
    report::write_ensemble_json(&ensemble, out_file(&a.common.out, "placebo.json")?)?;
    report::write_pvalues_csv(&ensemble, out_file(&a.common.out, "pvalues.csv")?)?;
    println!("p = {}", p_value(&ensemble));
    Ok(())
}

fn cmd_sweep(a: &StudyArgs) -> CliResult<()> {
    let s = load_study(a)?;
    let rows = training_sweep(&s.spec, &a.t_fit, &s.panel, &s.predictors, &placebo_options(a, &s));
    report::write_sweep_csv(&rows, out_file(&a.common.out, "sweep.csv")?)?;
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Failure::compute("every training length failed; see sweep.csv"));
    }
    Ok(())
}

fn cmd_logistic(a: &LogisticArgs) -> CliResult<()> {
    require_file(&a.outcomes, "outcome")?;
    if let Some(p) = &a.predictors {
        require_file(p, "predictor")?;
    }
    if a.bins == 0 {
        return Err(Failure::config("--bins must be positive"));
    }
    let panel = panel::read_panel(&a.outcomes)?;
    let mut series = BTreeMap::new();
    let mut failures: BTreeMap<UnitId, String> = BTreeMap::new();
    for u in panel.units() {
        match interpolate_missing(panel.series(u)?) {
            Ok(s) => {
                series.insert(u.clone(), s);
            }
            Err(e) => {
                failures.insert(u.clone(), e.to_string());
            }
        }
    }
    let opts = LogisticOptions { seed: a.common.seed, ..Default::default() };
    let mut fits = BTreeMap::new();
    for (u, r) in fit_many(&series, &opts, parallelism(&a.common))? {
        match r {
            Ok(f) if f.identifiable => {
                fits.insert(u, f);
            }
            Ok(_) => {
                failures.insert(u, "no growth; K is not identifiable".into());
            }
            Err(e) => {
                failures.insert(u, e.to_string());
            }
        }
    }
    let total = panel.n_units();
    report::write_failures_csv(&failures, out_file(&a.common.out, "fit_failures.csv")?)?;
    if fits.len() * 2 < total {
        return Err(Failure::compute(format!("only {} of {total} units could be fitted", fits.len())));
    }
    let quadrants = if fits.len() >= 2 { classify_quadrant(&fits)? } else { BTreeMap::new() };
    report::write_fits_csv(&fits, &quadrants, out_file(&a.common.out, "fits.csv")?)?;

    let mut regressions = Vec::new();
    let mut deciles = Vec::new();
    if let Some(p) = &a.predictors {
        let table = panel::read_predictors(p)?;
        let units: Vec<&UnitId> = fits.keys().filter(|u| table.row(u).is_ok()).collect();
        for (h, theme) in table.names().iter().enumerate() {
            let index: Vec<f64> = units.iter().map(|u| table.row(u).map(|r| r[h])).collect::<Result<_, _>>()?;
            for (param, values) in [
                ("K", units.iter().map(|u| fits[*u].k).collect::<Vec<f64>>()),
                ("nu", units.iter().map(|u| fits[*u].nu).collect::<Vec<f64>>()),
            ] {
                match theme_regression(&index, &values) {
                    Ok(line) => regressions.push((theme.clone(), param.to_string(), line)),
                    Err(e) => eprintln!("warning: regression of {param} on {theme}: {e}"),
                }
                match decile_summary(&values, &index, a.bins) {
                    Ok(b) => deciles.push((theme.clone(), param.to_string(), b)),
                    Err(e) => eprintln!("warning: bins of {param} by {theme}: {e}"),
                }
            }
        }
    }
    report::write_regression_csv(&regressions, out_file(&a.common.out, "ccvi_regression.csv")?)?;
    report::write_deciles_csv(&deciles, out_file(&a.common.out, "deciles.csv")?)?;
    Ok(())
}

fn cmd_select(a: &SelectArgs) -> CliResult<()> {
    require_file(&a.predictors, "predictor")?;
    require_file(&a.blocks, "blocks")?;
    let table = panel::read_predictors(&a.predictors)?;
    let blocks = donors::read_blocks(&a.blocks)?;
    let corr = CorrMatrix::from_table(&table)?;
    let sel = select_predictors_naive(&corr, &blocks, a.threshold, a.per_block)?;
    for b in &sel.short_blocks {
        eprintln!("warning: block {b} supplied fewer than {} weakly correlated predictors", a.per_block);
    }
    let mut w = out_file(&a.common.out, "selected_predictors.csv")?;
    use std::io::Write;
    let io = |e: std::io::Error| Failure::config(e.to_string());
    writeln!(w, "block,predictor").map_err(io)?;
    for (b, p) in &sel.selected {
        writeln!(w, "{b},{p}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> CliResult<()> {
    require_file(&a.outcomes, "outcome")?;
    let repair_mode = a.repair.parse::<RepairMode>()?;
    let policy = CleaningPolicy { max_bad_fraction: a.max_bad_fraction, window: a.window, repair_mode };
    policy.validate()?;
    let raw = panel::read_panel(&a.outcomes)?;
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    let mut dropped: BTreeMap<UnitId, String> = BTreeMap::new();
    for u in raw.units() {
        match clean_series(raw.series(u)?, &policy) {
            Ok(CleanOutcome::Cleaned(s)) => {
                kept.push(u.clone());
                rows.push(s.into_iter().map(Some).collect());
            }
            Ok(CleanOutcome::Dropped { bad_fraction }) => {
                dropped.insert(u.clone(), format!("bad fraction {}", report::fmt_f64(bad_fraction)));
            }
            Err(e) => {
                dropped.insert(u.clone(), e.to_string());
            }
        }
    }
    if kept.is_empty() {
        return Err(Failure::compute("every unit was dropped"));
    }
    let cleaned = Panel::new(kept, raw.dates().to_vec(), rows)?;
    cleaned.write_long_csv(out_file(&a.common.out, "cleaned.csv")?)?;
    report::write_failures_csv(&dropped, out_file(&a.common.out, "dropped.csv")?)?;
    eprintln!("kept {} units, dropped {}", cleaned.n_units(), dropped.len());
    Ok(())
}
