mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssvr::data::{
    load_manifest, read_reports_csv, split_by_patient, synth_generate, write_labels_csv, write_png16, DataError, Dataset,
    KeywordRuleset, LabelRow, Split, SplitManifest,
};
use ssvr::eval::{evaluate, median, write_metrics_csv, write_predictions_csv, EvalError, MetricsRow};
use ssvr::model::ModelParams;
use ssvr::optim::{
    fit_observed, load_checkpoint, resume, save_checkpoint, EpochReport, LogRow, Method, OptimError, StopReason,
    TrainData, TrainObserver,
};

use config::{Resolved, RunConfig, SplitSource};

#[derive(Parser)]
#[command(name = "ssvr", version, about = "Semi-supervised severity regression on chest radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom benchmark.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Derive severity labels from report text with keyword rules.
    ExtractLabels {
        /// CSV with image_id, patient_id, report_text and optional chf_cohort.
        #[arg(long)]
        reports: PathBuf,
        /// Labels CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Ruleset file of `severity<TAB>phrase` lines; built-in rules if omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Only label reports flagged as part of the cohort.
        #[arg(long)]
        cohort_only: bool,
    },
    /// Train a model and write checkpoints and a log into a run directory.
    Train {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// Data directory holding images/ and labels.csv (overrides data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue an interrupted run from its last checkpoint.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the validation or test split of a run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to evaluate (default: RUN/best.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        /// Metrics CSV to write; per-class medians go to `<stem>_per_class.csv` beside it.
        #[arg(long)]
        out: PathBuf,
        /// Per-image predictions CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EvalSplit {
    Test,
    Validation,
}

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::InvalidFractions(_) | DataError::InvalidCrop { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            OptimError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var("SSVR_THREADS") {
        if !matches!(v.trim().parse::<usize>(), Ok(n) if n > 0) {
            return Err(CliError::Usage(format!("SSVR_THREADS={v:?} is not a positive integer")));
        }
    }
    match cli.command {
        Command::Synth { out, cfg } => cmd_synth(&out, &cfg),
        Command::ExtractLabels {
            reports,
            out,
            rules,
            cohort_only,
        } => cmd_extract(&reports, &out, rules.as_deref(), cohort_only),
        Command::Train { run, data, resume, cfg } => cmd_train(&run, data, resume, &cfg),
        Command::Eval {
            run,
            checkpoint,
            split,
            out,
            predictions,
        } => cmd_eval(&run, checkpoint, split, &out, predictions.as_deref()),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        cfg.apply_text(&text, &path.display().to_string()).map_err(CliError::Usage)?;
    }
    for kv in &args.set {
        cfg.apply_override(kv).map_err(CliError::Usage)?;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_error(path))
}

/// Writes through a temporary file so readers never see a partial file.
fn replace_file(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)
}

fn cmd_synth(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let resolved = cfg.resolve().map_err(CliError::Usage)?;
    let synth = synth_generate(&resolved.synth)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(io_error(&images))?;
    let mut labels = Vec::with_capacity(synth.dataset.len());
    let mut truth = String::from("image_id,severity_continuous\n");
    for (r, s) in synth.dataset.records().iter().zip(&synth.severities) {
        write_png16(&images.join(format!("{}.png", r.image_id)), &r.pixels, r.side)?;
        labels.push(LabelRow {
            image_id: r.image_id.clone(),
            patient_id: r.patient_id.clone(),
            severity: r.severity,
            report_text: None,
            chf_cohort: r.chf_cohort,
        });
        truth.push_str(&format!("{},{s}\n", r.image_id));
    }
    write_labels_csv(&out.join("labels.csv"), &labels)?;
    write_text(&out.join("truth.csv"), &truth)?;
    synth.manifest.write_csv(&out.join("split.csv"))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} images ({} labeled) for {} patients to {}",
        synth.dataset.len(),
        synth.dataset.num_labeled(),
        synth.manifest.entries().iter().map(|e| &e.patient_id).collect::<std::collections::BTreeSet<_>>().len(),
        out.display()
    );
    Ok(())
}

fn cmd_extract(reports: &Path, out: &Path, rules: Option<&Path>, cohort_only: bool) -> Result<()> {
    let mut ruleset = match rules {
        Some(p) => KeywordRuleset::from_file(p)?,
        None => KeywordRuleset::default(),
    };
    ruleset.cohort_only = cohort_only;
    if ruleset.rules.is_empty() {
        eprintln!("warning: ruleset is empty; no report will be labeled");
    }
    let mut rows = read_reports_csv(reports)?;
    let mut per_class = [0usize; 4];
    for row in &mut rows {
        row.severity = row.report_text.as_deref().and_then(|t| ruleset.label(t, row.chf_cohort));
        if let Some(s) = row.severity {
            per_class[s as usize] += 1;
        }
    }
    write_labels_csv(out, &rows)?;
    let matched: usize = per_class.iter().sum();
    let rate = if rows.is_empty() { 0.0 } else { 100.0 * matched as f64 / rows.len() as f64 };
    println!(
        "labeled {matched} of {} reports ({rate:.1}%); per class 0/1/2/3: {}/{}/{}/{}",
        rows.len(),
        per_class[0],
        per_class[1],
        per_class[2],
        per_class[3]
    );
    Ok(())
}

fn load_data(resolved: &Resolved) -> Result<Dataset> {
    let dir = &resolved.data_dir;
    Ok(load_manifest(&dir.join("images"), &dir.join("labels.csv"))?)
}

fn make_split(resolved: &Resolved, dataset: &Dataset) -> Result<SplitManifest> {
    let auto = resolved.data_dir.join("split.csv");
    let manifest = match &resolved.split {
        SplitSource::File(p) => SplitManifest::read_csv(p)?,
        SplitSource::Auto if auto.exists() => SplitManifest::read_csv(&auto)?,
        _ => split_by_patient(dataset, resolved.split_fractions, resolved.split_seed)?,
    };
    for e in manifest.entries() {
        let r = dataset.get(&e.image_id).ok_or_else(|| {
            CliError::Data(format!("split lists image {} which is not in the dataset", e.image_id))
        })?;
        if r.patient_id != e.patient_id || r.is_labeled() != e.labeled {
            return Err(CliError::Data(format!("split entry for {} disagrees with labels.csv", e.image_id)));
        }
    }
    Ok(manifest)
}

struct RunWriter {
    dir: PathBuf,
    log: String,
    events: fs::File,
}

impl RunWriter {
    fn event(&mut self, msg: &str) -> std::io::Result<()> {
        writeln!(self.events, "{msg}")
    }

    fn persist(&mut self, report: &EpochReport<'_>) -> std::io::Result<()> {
        self.log.push_str(&report.row.to_csv());
        self.log.push('\n');
        replace_file(&self.dir.join("log.csv"), &self.log)?;
        let ckpt_err = |e: OptimError| std::io::Error::other(e.to_string());
        save_checkpoint(report.last, &self.dir.join("last.ckpt")).map_err(ckpt_err)?;
        if report.improved {
            save_checkpoint(report.best, &self.dir.join("best.ckpt")).map_err(ckpt_err)?;
            self.event(&format!("epoch {}: new best validation rms {}", report.row.epoch, report.best.progress.best_rms))?;
        }
        Ok(())
    }
}

impl TrainObserver for RunWriter {
    fn epoch_finished(&mut self, report: &EpochReport<'_>) -> ssvr::optim::Result<()> {
        let row = report.row;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "epoch {:>4}  labeled {}  unlabeled {}  val_rms {}  val_cc {}",
            row.epoch,
            fmt(row.labeled.map(|s| s.total)),
            fmt(row.unlabeled.map(|s| s.total)),
            fmt(row.val_rms),
            fmt(row.val_cc),
        );
        self.persist(report).map_err(|source| OptimError::Io {
            path: self.dir.clone(),
            source,
        })
    }
}

const RESUMABLE_KEYS: [&str; 2] = ["max_epochs", "patience"];

fn cmd_train(run: &Path, data: Option<PathBuf>, resume_run: bool, args: &ConfigArgs) -> Result<()> {
    let config_path = run.join("config.txt");
    let last_path = run.join("last.ckpt");
    if resume_run {
        let previous = fs::read_to_string(&config_path).map_err(io_error(&config_path))?;
        let mut saved = RunConfig::default();
        saved.apply_text(&previous, &config_path.display().to_string()).map_err(CliError::Data)?;
        let mut wanted = saved.clone();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).map_err(io_error(path))?;
            wanted.apply_text(&text, &path.display().to_string()).map_err(CliError::Usage)?;
        }
        for kv in &args.set {
            wanted.apply_override(kv).map_err(CliError::Usage)?;
        }
        if let Some(d) = &data {
            wanted.set("data_dir", &d.display().to_string()).map_err(CliError::Usage)?;
        }
        let mut masked = wanted.clone();
        for key in RESUMABLE_KEYS {
            masked.set(key, saved.get(key)).map_err(CliError::Usage)?;
        }
        if masked != saved {
            return Err(CliError::Usage(format!(
                "only {} may change when resuming",
                RESUMABLE_KEYS.join(" and ")
            )));
        }
        write_text(&config_path, &wanted.to_text())?;
        return train_resume(run, wanted);
    }
    let mut cfg = load_config(args)?;
    if let Some(d) = data {
        cfg.set("data_dir", &d.display().to_string()).map_err(CliError::Usage)?;
    }
    let resolved = cfg.resolve().map_err(CliError::Usage)?;
    if last_path.exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --resume or choose another directory",
            run.display()
        )));
    }
    fs::create_dir_all(run).map_err(io_error(run))?;
    write_text(&config_path, &cfg.to_text())?;

    let dataset = load_data(&resolved)?;
    let manifest = make_split(&resolved, &dataset)?;
    manifest.write_csv(&run.join("split.csv"))?;
    let events_path = run.join("events.log");
    let events = fs::File::create(&events_path).map_err(io_error(&events_path))?;
    let mut writer = RunWriter {
        dir: run.to_path_buf(),
        log: format!("{}\n", LogRow::HEADER),
        events,
    };
    let data = train_data(&dataset, &manifest)?;
    note_unused(&mut writer, &resolved, &data).map_err(io_error(&events_path))?;
    let init = ModelParams::init(resolved.arch.clone(), resolved.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = fit_observed(init, &data, &resolved.train, &mut writer)?;
    finish(&mut writer, outcome.stop, &outcome.best).map_err(io_error(&events_path))
}

fn train_resume(run: &Path, cfg: RunConfig) -> Result<()> {
    let resolved = cfg.resolve().map_err(CliError::Usage)?;
    let last = load_checkpoint(&run.join("last.ckpt"))?;
    let best = load_checkpoint(&run.join("best.ckpt"))?;
    let dataset = load_data(&resolved)?;
    let manifest = SplitManifest::read_csv(&run.join("split.csv"))?;
    let data = train_data(&dataset, &manifest)?;

    let log_path = run.join("log.csv");
    let text = fs::read_to_string(&log_path).map_err(io_error(&log_path))?;
    let mut log = format!("{}\n", LogRow::HEADER);
    for line in text.lines().skip(1) {
        let epoch: u64 = line
            .split(',')
            .next()
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{}: malformed row {line:?}", log_path.display())))?;
        if epoch <= last.epoch {
            log.push_str(line);
            log.push('\n');
        }
    }
    let events_path = run.join("events.log");
    let events = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&events_path)
        .map_err(io_error(&events_path))?;
    let mut writer = RunWriter {
        dir: run.to_path_buf(),
        log,
        events,
    };
    writer
        .event(&format!("resumed after epoch {}", last.epoch))
        .map_err(io_error(&events_path))?;
    let outcome = resume(last, best, Vec::new(), &data, &resolved.train, &mut writer)?;
    finish(&mut writer, outcome.stop, &outcome.best).map_err(io_error(&events_path))
}

fn train_data<'a>(dataset: &'a Dataset, manifest: &SplitManifest) -> Result<TrainData<'a>> {
    Ok(TrainData {
        labeled: dataset.select(&manifest.train_labeled())?,
        unlabeled: dataset.select(&manifest.train_unlabeled())?,
        validation: dataset.select(&manifest.validation())?,
    })
}

fn note_unused(writer: &mut RunWriter, resolved: &Resolved, data: &TrainData<'_>) -> std::io::Result<()> {
    writer.event(&format!(
        "method {}: {} labeled, {} unlabeled, {} validation images",
        resolved.method,
        data.labeled.len(),
        data.unlabeled.len(),
        data.validation.len()
    ))?;
    if resolved.method == Method::Supervised && !data.unlabeled.is_empty() {
        writer.event(&format!(
            "method supervised ignores the {} unlabeled training images",
            data.unlabeled.len()
        ))?;
    }
    Ok(())
}

fn finish(writer: &mut RunWriter, stop: StopReason, best: &ssvr::optim::Checkpoint) -> std::io::Result<()> {
    let why = match stop {
        StopReason::MaxEpochs => "reached max_epochs",
        StopReason::EarlyStop => "early stop",
    };
    let msg = format!(
        "{why}: best epoch {} validation rms {}",
        best.progress.best_epoch, best.progress.best_rms
    );
    writer.event(&msg)?;
    println!("{msg}");
    Ok(())
}

fn cmd_eval(
    run: &Path,
    checkpoint: Option<PathBuf>,
    split: EvalSplit,
    out: &Path,
    predictions: Option<&Path>,
) -> Result<()> {
    let config_path = run.join("config.txt");
    let text = fs::read_to_string(&config_path).map_err(io_error(&config_path))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text, &config_path.display().to_string()).map_err(CliError::Data)?;
    let resolved = cfg.resolve().map_err(CliError::Data)?;
    let ckpt = load_checkpoint(&checkpoint.unwrap_or_else(|| run.join("best.ckpt")))?;
    let dataset = load_data(&resolved)?;
    let manifest = SplitManifest::read_csv(&run.join("split.csv"))?;
    let ids = match split {
        EvalSplit::Test => manifest.ids(Split::Test, Some(true)),
        EvalSplit::Validation => manifest.ids(Split::Validation, Some(true)),
    };
    let images = dataset.select(&ids)?;
    let metrics = evaluate(&ckpt.params, &images)?;
    let rows = [MetricsRow {
        method: resolved.method.name(),
        seed: resolved.seed,
        metrics: &metrics,
    }];
    write_metrics_csv(out, &rows)?;
    if let Some(p) = predictions {
        write_predictions_csv(p, &rows)?;
    }
    let cc = metrics.pearson_cc.map_or("undefined".to_string(), |c| format!("{c:.4}"));
    println!("{} images: rms {:.4} cc {cc}", metrics.n, metrics.rms);

    let mut per_class = String::from("true_class,n,median,mean\n");
    for (class, values) in metrics.per_class.iter().enumerate() {
        let med = median(values).map(|m| m.to_string()).unwrap_or_default();
        let mean = if values.is_empty() {
            String::new()
        } else {
            (values.iter().sum::<f64>() / values.len() as f64).to_string()
        };
        per_class.push_str(&format!("{class},{},{med},{mean}\n", values.len()));
        println!("  class {class}: n {:>4}  median {}", values.len(), median(values).map_or("-".into(), |m| format!("{m:.3}")));
    }
    write_text(&per_class_path(out), &per_class)
}

/// `metrics.csv` → `metrics_per_class.csv`, next to the metrics file.
fn per_class_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("metrics".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_per_class.csv"))
}
