//! The `dfsos` command-line tool.
//!
//! Exit codes: 0 success (warnings allowed), 2 usage error, 3 data error,
//! 4 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::classify::{self, Classifier};
use crate::datagen::{
    generate_gaussians, load_delimited, load_delimited_with_labels, save_delimited, DelimitedFormat, GaussianSpec,
};
use crate::error::{Result, SosError};
use crate::experiment::{
    cross_validate, run_benchmark, BenchMethod, BenchPlan, BenchReport, BenchSource, CvPlan, MethodRuns, RunRecord,
    Selection,
};
use crate::model::{Dataset, LambdaChoice, Method, Scaling, SolverConfig};
use crate::model_file::{trace_csv, ModelFile};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "SOS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dfsos", version, about = "Sparse optimal scoring for high-dimensional classification")]
pub struct Cli {
    /// Worker threads (default: SOS_THREADS, else all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    /// TOML file with solver and cross-validation settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write Gaussian train/test files and a spec manifest.
    Generate(GenerateArgs),
    /// Fit a model on a labelled data file.
    Fit(FitArgs),
    /// Predict labels for a data file.
    Predict(ModelDataArgs),
    /// Report accuracy and cardinality on a labelled data file.
    Evaluate(ModelDataArgs),
    /// Write discriminant scores with true and predicted labels.
    Project(ModelDataArgs),
    /// Build a comparison report from saved prediction files.
    Compare(CompareArgs),
    /// Run the repeated cross-validated benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    #[arg(long = "K", default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub r: f64,
    #[arg(long, default_value_t = 1000)]
    pub p: usize,
    #[arg(long, default_value_t = 100)]
    pub block: usize,
    #[arg(long, default_value_t = 0.7)]
    pub mean_value: f64,
    #[arg(long, default_value_t = 100)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
}

impl SpecArgs {
    fn spec(&self, seed: u64) -> GaussianSpec {
        GaussianSpec {
            classes: self.classes,
            r: self.r,
            p: self.p,
            block: self.block,
            mean_value: self.mean_value,
            n_train_per_class: self.n_train,
            n_test_per_class: self.n_test,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Gaussian,
    TimeSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    /// `.csv` files are label-last, everything else label-first.
    Auto,
    Tsv,
    Csv,
}

impl FormatArg {
    fn resolve(self, path: &Path) -> DelimitedFormat {
        match self {
            FormatArg::Auto => DelimitedFormat::from_path(path),
            FormatArg::Tsv => DelimitedFormat::LabelFirstTSV,
            FormatArg::Csv => DelimitedFormat::LabelLastCSV,
        }
    }
}

/// Solver settings settable from the command line. Unset flags fall back
/// to the config file, then to the profile defaults.
#[derive(Debug, Args, Default)]
pub struct SolverArgs {
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fixed ℓ1 weight.
    #[arg(long, conflicts_with = "lambda_mult")]
    pub lambda: Option<f64>,
    /// ℓ1 weight as a multiple of λ_max.
    #[arg(long)]
    pub lambda_mult: Option<f64>,
    #[arg(long)]
    pub rho0: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tol_inner: Option<f64>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub tol_outer: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub per_column_lambda: bool,
    /// none, unit-variance or unit-norm.
    #[arg(long)]
    pub scaling: Option<Scaling>,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// APG, ADMM, DFSOS-1 or DFSOS-2.
    #[arg(long, default_value = "DFSOS-1")]
    pub method: Method,
    /// Number of discriminant vectors (default K − 1).
    #[arg(long)]
    pub q: Option<usize>,
    /// Choose the λ multiplier by cross-validation first.
    #[arg(long)]
    pub cv: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value = "model.txt")]
    pub out: PathBuf,
    /// Trace CSV (default: model path with `.trace.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Directory of `<method>__rep<r>.tsv` files holding `truth<TAB>predicted` rows.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Use fixed train/test files instead of generated data.
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Comma-separated: APG, ADMM, DFSOS-1, DFSOS-2, KNN-<k>. Default: all.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub q: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value = "bench")]
    pub out: PathBuf,
}

/// Optional `[cv]` table of a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CvSection {
    grid: Option<Vec<f64>>,
    folds: Option<usize>,
}

struct Settings {
    solver: SolverConfig,
    cv: CvPlan,
}

fn load_settings(config: Option<&Path>, args: &SolverArgs) -> Result<Settings> {
    let profile = args.profile.unwrap_or(Profile::Gaussian);
    let base = match profile {
        Profile::Gaussian => SolverConfig::gaussian_profile(),
        Profile::TimeSeries => SolverConfig::time_series_profile(),
    };
    let mut cv = match profile {
        Profile::Gaussian => CvPlan::gaussian(),
        Profile::TimeSeries => CvPlan::time_series(),
    };
    let mut solver = base.clone();
    if let Some(path) = config {
        let text =
            fs::read_to_string(path).map_err(|e| SosError::io(format!("reading {}", path.display()), e))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| SosError::InvalidInput(format!("{}: {e}", path.display())))?;
        let section: CvSection = match table.remove("cv") {
            Some(v) => v
                .try_into()
                .map_err(|e| SosError::InvalidInput(format!("{}: [cv]: {e}", path.display())))?,
            None => CvSection::default(),
        };
        let mut merged = toml::Table::try_from(&base).expect("config serializes");
        if let Some(key) = table.keys().find(|k| !merged.contains_key(*k)) {
            return Err(SosError::InvalidInput(format!("{}: unknown key {key:?}", path.display())));
        }
        merged.extend(table);
        solver = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| SosError::InvalidInput(format!("{}: {e}", path.display())))?;
        if let Some(g) = section.grid {
            cv.grid_multipliers = g;
        }
        if let Some(f) = section.folds {
            cv.folds = f;
        }
    }
    macro_rules! over {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    over!(args.gamma, solver.gamma);
    over!(args.lambda.map(LambdaChoice::Fixed), solver.lambda);
    over!(args.lambda_mult.map(LambdaChoice::Auto), solver.lambda);
    over!(args.rho0, solver.rho0);
    over!(args.eta, solver.eta);
    over!(args.sigma, solver.sigma);
    over!(args.mu, solver.mu_admm);
    over!(args.tol_inner, solver.tol_inner_beta);
    over!(args.max_inner, solver.max_inner_beta);
    over!(args.tol_outer, solver.tol_outer);
    over!(args.max_outer, solver.max_outer);
    over!(args.seed, solver.seed);
    over!(args.scaling, solver.scaling);
    over!(args.folds, cv.folds);
    if args.per_column_lambda {
        solver.per_column_lambda = true;
    }
    solver.validate()?;
    cv.validate()?;
    Ok(Settings { solver, cv })
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| SosError::io(format!("writing {}", p.display()), e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    write_out(Some(path), text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SosError::io(format!("creating {}", dir.display()), e))
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = args.spec.spec(args.seed);
    let (train, test) = generate_gaussians(&spec)?;
    create_dir(&args.out)?;
    save_delimited(&args.out.join("train.tsv"), &train, DelimitedFormat::LabelFirstTSV)?;
    save_delimited(&args.out.join("test.tsv"), &test, DelimitedFormat::LabelFirstTSV)?;
    let manifest = toml::to_string(&spec).expect("spec serializes");
    write_file(&args.out.join("spec.toml"), &manifest)?;
    log::info!("wrote {} training and {} test rows to {}", train.n(), test.n(), args.out.display());
    Ok(())
}

fn cmd_fit(args: &FitArgs, config: Option<&Path>) -> Result<()> {
    let settings = load_settings(config, &args.solver)?;
    let data = load_delimited(&args.data, args.format.resolve(&args.data), None)?;
    let mut cfg = settings.solver;
    if args.cv {
        let outcome = cross_validate(&data, &cfg, &settings.cv, args.method, args.q)?;
        log::info!("cross-validation selected multiplier {}", outcome.best_multiplier);
        cfg.lambda = LambdaChoice::Auto(outcome.best_multiplier);
    }
    let (classifier, trace) = Classifier::fit(&data, &cfg, args.q, args.method)?;
    for w in &trace.warnings {
        log::warn!("{w}");
    }
    if !trace.converged {
        eprintln!("warning: fit did not converge within the iteration cap");
    }
    let file = ModelFile {
        classifier,
        class_labels: data.class_labels.clone(),
        seed: cfg.seed,
        converged: trace.converged,
        iterations: trace.iterations,
    };
    file.save(&args.out)?;
    let trace_path = args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_file(&trace_path, &trace_csv(&trace))?;
    Ok(())
}

fn load_for_model(file: &ModelFile, args: &ModelDataArgs) -> Result<Dataset> {
    let data = load_delimited_with_labels(&args.data, args.format.resolve(&args.data), &file.class_labels)?;
    let p = file.classifier.model.beta.nrows();
    if data.p() != p {
        return Err(SosError::ShapeMismatch(format!(
            "{} has {} features, the model expects {p}",
            args.data.display(),
            data.p()
        )));
    }
    Ok(data)
}

fn cmd_predict(args: &ModelDataArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let data = load_for_model(&file, args)?;
    let pred = file.classifier.predict(&data.x)?;
    let mut out = String::new();
    for k in pred {
        let _ = writeln!(out, "{}", file.class_labels[k - 1]);
    }
    write_out(args.out.as_deref(), &out)
}

fn cmd_evaluate(args: &ModelDataArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let data = load_for_model(&file, args)?;
    let pred = file.classifier.predict(&data.x)?;
    let beta = &file.classifier.model.beta;
    let m = classify::metrics(&pred, &data.labels, beta);
    let out = format!(
        "n={}\naccuracy={:.16e}\ncardinality={:.16e}\nentry_density={:.16e}\n",
        data.n(),
        m.accuracy,
        m.cardinality,
        classify::entry_density(beta)
    );
    write_out(args.out.as_deref(), &out)
}

fn cmd_project(args: &ModelDataArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let data = load_for_model(&file, args)?;
    let scores = file.classifier.centroids.project(&data.x)?;
    let pred = classify::predict_nearest_centroid(&file.classifier.centroids, &scores);
    let q = scores.ncols();
    let mut out = (1..=q).map(|i| format!("score{i}")).collect::<Vec<_>>().join(",");
    out.push_str(",true_label,predicted_label\n");
    for (i, row) in scores.row_iter().enumerate() {
        for v in row.iter() {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = writeln!(
            out,
            "{},{}",
            file.class_labels[data.labels[i] - 1],
            file.class_labels[pred[i] - 1]
        );
    }
    write_out(args.out.as_deref(), &out)
}

/// Parses `<method>__rep<r>.tsv`.
fn prediction_file_name(name: &str) -> Option<(String, usize)> {
    let stem = name.strip_suffix(".tsv")?;
    let (method, rep) = stem.rsplit_once("__rep")?;
    Some((method.to_string(), rep.parse().ok()?))
}

fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| SosError::io(format!("reading {}", path.display()), e))?;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(SosError::RaggedRows {
                path: path.to_path_buf(),
                line: i + 1,
                expected: 2,
                found: fields.len(),
            });
        }
        truth.push(fields[0].trim().to_string());
        pred.push(fields[1].trim().to_string());
    }
    Ok((truth, pred))
}

fn predictions_tsv(truth: &[usize], pred: &[usize], labels: &[String]) -> String {
    let mut out = String::new();
    for (t, p) in truth.iter().zip(pred) {
        let _ = writeln!(out, "{}\t{}", labels[t - 1], labels[p - 1]);
    }
    out
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let entries = fs::read_dir(&args.dir).map_err(|e| SosError::io(format!("listing {}", args.dir.display()), e))?;
    let mut files: Vec<(String, usize, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| SosError::io(format!("listing {}", args.dir.display()), e))?;
        if let Some((method, rep)) = entry.file_name().to_str().and_then(prediction_file_name) {
            files.push((method, rep, entry.path()));
        }
    }
    if files.is_empty() {
        return Err(SosError::InvalidInput(format!(
            "no <method>__rep<r>.tsv files in {}",
            args.dir.display()
        )));
    }
    files.sort();
    let mut names: Vec<String> = files.iter().map(|f| f.0.clone()).collect();
    names.dedup();
    let reps = files.iter().map(|f| f.1).max().unwrap_or(0) + 1;

    // One label code table across all files, so encodings are comparable.
    let mut raw = Vec::new();
    let mut all_labels: Vec<String> = Vec::new();
    for (method, rep, path) in &files {
        let (truth, pred) = read_predictions(path)?;
        for l in truth.iter().chain(&pred) {
            if !all_labels.contains(l) {
                all_labels.push(l.clone());
            }
        }
        raw.push((method.clone(), *rep, truth, pred));
    }
    all_labels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    });
    let code = |l: &String| all_labels.iter().position(|x| x == l).expect("label collected") + 1;

    let mut methods: Vec<MethodRuns> = names
        .iter()
        .map(|n| MethodRuns {
            name: n.clone(),
            runs: vec![Err("missing".to_string()); reps],
        })
        .collect();
    for (method, rep, truth, pred) in raw {
        let t: Vec<usize> = truth.iter().map(code).collect();
        let p: Vec<usize> = pred.iter().map(code).collect();
        let slot = methods.iter_mut().find(|m| m.name == method).expect("method listed");
        slot.runs[rep] = Ok(RunRecord {
            accuracy: classify::accuracy(&p, &t),
            cardinality: f64::NAN,
            runtime_s: f64::NAN,
            multiplier: None,
            orth_residual: None,
            predictions: p,
        });
    }
    let report = BenchReport::from_runs(methods, reps);
    match &args.out {
        Some(dir) => write_report(dir, &report, false),
        None => {
            print!("{}", report.table(false));
            print!("{}", report.cosine_table(false));
            Ok(())
        }
    }
}

fn write_report(dir: &Path, report: &BenchReport, with_runtime: bool) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("table.tsv"), &report.table(false))?;
    write_file(&dir.join("summary.txt"), &report.key_values(false))?;
    write_file(&dir.join("raw.tsv"), &report.raw(false))?;
    write_file(&dir.join("cosine.tsv"), &report.cosine_table(false))?;
    write_file(&dir.join("cosine_onehot.tsv"), &report.cosine_table(true))?;
    if with_runtime {
        // kept apart: wall times are the only nondeterministic output
        write_file(&dir.join("runtime.tsv"), &report.table(true))?;
    }
    Ok(())
}

fn parse_bench_method(s: &str) -> Result<BenchMethod> {
    let lower = s.to_ascii_lowercase();
    if let Some(k) = lower.strip_prefix("knn-").or_else(|| lower.strip_suffix("-nn")) {
        let k = k
            .parse()
            .map_err(|_| SosError::InvalidInput(format!("bad neighbour count in {s:?}")))?;
        return Ok(BenchMethod::Knn(k));
    }
    Ok(BenchMethod::Sos(s.parse()?))
}

fn cmd_bench(args: &BenchArgs, config: Option<&Path>) -> Result<()> {
    let settings = load_settings(config, &args.solver)?;
    let methods = if args.methods.is_empty() {
        BenchMethod::standard_set()
    } else {
        args.methods.iter().map(|m| parse_bench_method(m)).collect::<Result<_>>()?
    };
    // --seed is the master seed: repetition r generates data with seed + r
    let master_seed = args.solver.seed.unwrap_or(0);
    let source = match (&args.train, &args.test) {
        (Some(train), Some(test)) => {
            let train_data = load_delimited(train, args.format.resolve(train), None)?;
            let test_data = load_delimited_with_labels(test, args.format.resolve(test), &train_data.class_labels)?;
            BenchSource::Fixed {
                train: train_data,
                test: test_data,
            }
        }
        _ => BenchSource::Gaussian(args.spec.spec(master_seed)),
    };
    let plan = BenchPlan {
        methods,
        repetitions: args.reps,
        master_seed,
        cv: CvPlan {
            selection: Selection::MaxAccuracy,
            ..settings.cv
        },
        q: args.q,
    };
    let report = run_benchmark(&source, &plan, &settings.solver)?;
    write_report(&args.out, &report, true)?;

    let labels: Vec<String> = match &source {
        BenchSource::Fixed { train, .. } => train.class_labels.clone(),
        BenchSource::Gaussian(spec) => (1..=spec.classes).map(|k| k.to_string()).collect(),
    };
    for (r, seed) in (0..args.reps).map(|r| (r, plan.master_seed.wrapping_add(r as u64))) {
        let truth = match &source {
            BenchSource::Fixed { test, .. } => test.labels.clone(),
            BenchSource::Gaussian(spec) => generate_gaussians(&GaussianSpec { seed, ..spec.clone() })?.1.labels,
        };
        for m in &report.methods {
            if let Ok(rec) = &m.runs[r] {
                let path = args.out.join(format!("{}__rep{r}.tsv", m.name));
                write_file(&path, &predictions_tsv(&truth, &rec.predictions, &labels))?;
            }
        }
    }
    print!("{}", report.table(true));
    Ok(())
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &SosError) -> i32 {
    if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_NUMERICAL
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads(cli.threads);
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Fit(a) => cmd_fit(a, config),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Project(a) => cmd_project(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Bench(a) => cmd_bench(a, config),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
