//! `dsbel` — command-line front end for the byte-image malware-detection
//! pipeline: convert binaries to images, train the CNN, extract deep
//! features, fit the classifier ensemble, and evaluate with reports.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

mod config;
mod manifest;

use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use dsbel_core::checkpoint::{load_checkpoint, save_checkpoint, SECTION_ENSEMBLE};
use dsbel_core::dataset::{
    generate_surrogate_corpus, generate_synthetic_corpus, load_dataset, Label, LabeledDataset,
};
use dsbel_core::ensemble::{to_f64, train_ensemble, ClassifierEnsemble};
use dsbel_core::features::{extract_feature_matrix, FeatureMatrix};
use dsbel_core::image::{bytes_to_image, write_pgm};
use dsbel_core::metrics::{compute_metrics, confusion, pr_curve, roc_auc};
use dsbel_core::model::Model;
use dsbel_core::pca::Pca;
use dsbel_core::report::{
    line_chart_svg, pca_scatter_svg, write_metrics_csv, NamedCurve, ReportRow,
};
use dsbel_core::split::{split_dataset, SplitPlan};
use dsbel_core::train::{pretrain_auxiliary, score, train};
use manifest::{sibling_manifest, RunManifest};
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// bad flags or config — exit 2
    Usage(String),
    /// bad inputs, IO failures, model/data mismatches — exit 1
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<dsbel_core::Error> for CliError {
    fn from(e: dsbel_core::Error) -> Self {
        match e {
            dsbel_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "dsbel", version, about = "Byte-image malware detection pipeline")]
struct Cli {
    /// Serialize nondeterministic reductions for bit-exact reruns.
    /// All computation in this build is serial, so this is always in
    /// effect; the flag is accepted for scripting stability.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Byte-map every file under a directory into grayscale PGM images
    Convert {
        /// input directory (walked recursively)
        #[arg(long = "in")]
        input: PathBuf,
        /// output directory; relative paths are preserved
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the auxiliary stem, then train the CNN
    Train {
        #[command(flatten)]
        data: DataSource,
        /// key=value config file overriding the default hyperparameters
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// checkpoint output path; history CSV and manifest are siblings
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract deep features from a trained checkpoint into a CSV
    Features {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataSource,
        #[arg(long, value_enum, default_value_t = SplitSel::Train)]
        split: SplitSel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the SVM/MLP/AdaBoost ensemble and append it to the checkpoint
    FitEnsemble {
        #[arg(long)]
        model: PathBuf,
        /// feature CSV produced by `features`
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a split and emit report.csv, roc.svg, pr.svg and pca.svg
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataSource,
        #[arg(long, value_enum, default_value_t = SplitSel::Test)]
        split: SplitSel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output directory for the report artifacts
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
    },
    /// Render a training-history CSV as loss/accuracy SVG charts
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exactly one corpus source: a directory of PGMs or the built-in
/// deterministic synthetic corpus.
#[derive(clap::Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// dataset root containing benign/ and malware/ PGM subdirectories
    #[arg(long)]
    data: Option<PathBuf>,
    /// generate a synthetic corpus with this many images per class
    #[arg(long)]
    synthetic: Option<usize>,
}

impl DataSource {
    fn load(&self, side: usize, seed: u64) -> Result<LabeledDataset, CliError> {
        match (&self.data, self.synthetic) {
            (Some(dir), None) => Ok(load_dataset(dir)?),
            (None, Some(n)) => {
                if n == 0 {
                    return Err(CliError::Usage("--synthetic needs n >= 1".into()));
                }
                Ok(generate_synthetic_corpus(n, side, seed))
            }
            _ => unreachable!("clap group enforces exactly one source"),
        }
    }

    fn describe(&self) -> String {
        match (&self.data, self.synthetic) {
            (Some(dir), _) => dir.display().to_string(),
            (_, Some(n)) => format!("synthetic:{n}"),
            _ => unreachable!(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitSel {
    Train,
    Val,
    Test,
    All,
}

impl SplitSel {
    fn indices(self, plan: &SplitPlan) -> Vec<usize> {
        match self {
            SplitSel::Train => plan.train.clone(),
            SplitSel::Val => plan.val.clone(),
            SplitSel::Test => plan.test.clone(),
            SplitSel::All => {
                let mut all: Vec<usize> =
                    plan.train.iter().chain(&plan.val).chain(&plan.test).copied().collect();
                all.sort_unstable();
                all
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitSel::Train => "train",
            SplitSel::Val => "val",
            SplitSel::Test => "test",
            SplitSel::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Cnn,
    Ensemble,
    Both,
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn main() {
    let cli = Cli::parse();
    if let Err(e) = check_threads().and_then(|_| run(cli.cmd)) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

/// DSBEL_THREADS caps internal worker count; all module internals are
/// serial in this build, so only validation is needed.
fn check_threads() -> Result<(), CliError> {
    match std::env::var("DSBEL_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(CliError::Usage(format!(
                "DSBEL_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Convert { input, out } => cmd_convert(&input, &out),
        Cmd::Train { data, config, seed, out } => cmd_train(&data, config.as_deref(), seed, &out),
        Cmd::Features { model, data, split, seed, out } => {
            cmd_features(&model, &data, split, seed, &out)
        }
        Cmd::FitEnsemble { model, features, seed } => cmd_fit_ensemble(&model, &features, seed),
        Cmd::Eval { model, data, split, seed, report, mode } => {
            cmd_eval(&model, &data, split, seed, &report, mode)
        }
        Cmd::Report { history, out } => cmd_report(&history, &out),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------------

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

fn cmd_convert(input: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    if !input.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", input.display())));
    }
    let mut rel_paths = Vec::new();
    walk_files(input, input, &mut rel_paths)
        .map_err(|e| CliError::Data(format!("cannot walk {}: {e}", input.display())))?;
    if rel_paths.is_empty() {
        eprintln!("warning: {} contains no files", input.display());
    }
    create_dir(out)?;
    let mut failures = Vec::new();
    let mut written = 0usize;
    for rel in &rel_paths {
        let src = input.join(rel);
        let mut dst_name = rel.file_name().unwrap().to_os_string();
        dst_name.push(".pgm");
        let dst = out.join(rel).with_file_name(dst_name);
        let result = std::fs::read(&src)
            .map_err(dsbel_core::Error::from)
            .and_then(|blob| bytes_to_image(&blob))
            .and_then(|img| {
                if let Some(parent) = dst.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                write_pgm(&img, &dst)
            });
        match result {
            Ok(()) => written += 1,
            Err(e) => {
                eprintln!("error: {}: {e}", src.display());
                failures.push(src);
            }
        }
    }
    let mut manifest = RunManifest::new("convert", 0);
    manifest.push("input", input.display());
    manifest.push("output", out.display());
    manifest.push("files_written", written);
    manifest.push("files_failed", failures.len());
    manifest.write(&out.join("manifest.txt"), started.elapsed().as_secs_f64())?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} file(s) failed to convert", failures.len())))
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(
    data: &DataSource,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.model.seed = seed;
    cfg.train.seed = seed;

    let ds = data.load(cfg.model.side, seed)?;
    let plan = split_dataset(&ds, seed)?;
    let mut model = Model::build(cfg.model.clone())?;

    let surrogate = generate_surrogate_corpus(cfg.surrogate_per_class, cfg.model.side, seed);
    let surrogate_losses = pretrain_auxiliary(&mut model, &surrogate, cfg.pretrain_epochs, &cfg.train)?;
    let (history, best) = train(&mut model, &ds, &plan, &cfg.train)?;

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    save_checkpoint(&best, out)?;
    let history_path = history_path_for(out);
    write_file(&history_path, &history.to_csv())?;

    let mut manifest = RunManifest::new("train", seed);
    manifest.push("input", data.describe());
    manifest.push("output", out.display());
    manifest.push("history", history_path.display());
    manifest.push("train_size", plan.train.len());
    manifest.push("val_size", plan.val.len());
    manifest.push("test_size", plan.test.len());
    manifest.push(
        "surrogate_final_loss",
        surrogate_losses.last().map_or("n/a".into(), |l| format!("{l:.6}")),
    );
    if let Some(last) = history.records.last() {
        manifest.push("final_train_acc", format!("{:.6}", last.train_acc));
        manifest.push("final_val_acc", format!("{:.6}", last.val_acc));
    }
    manifest.push_block("config", &cfg.to_text());
    manifest.write(&sibling_manifest(out), started.elapsed().as_secs_f64())
}

/// `model.dsbl` -> `model.history.csv` next to it.
fn history_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.history.csv"))
}

// ---------------------------------------------------------------------------
// features
// ---------------------------------------------------------------------------

fn cmd_features(
    model_path: &Path,
    data: &DataSource,
    split: SplitSel,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let (model, _) = load_checkpoint(model_path)?;
    let ds = data.load(model.config.side, seed)?;
    let plan = split_dataset(&ds, seed)?;
    let indices = split.indices(&plan);
    if indices.is_empty() {
        return Err(CliError::Data(format!("split {:?} is empty", split.name())));
    }
    let fm = extract_feature_matrix(&model, &ds, &indices)?;
    write_file(out, &fm.to_csv())?;

    let mut manifest = RunManifest::new("features", seed);
    manifest.push("model", model_path.display());
    manifest.push("input", data.describe());
    manifest.push("split", split.name());
    manifest.push("rows", fm.len());
    manifest.push("feature_dim", fm.dim());
    manifest.push("output", out.display());
    manifest.write(&sibling_manifest(out), started.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------------------
// fit-ensemble
// ---------------------------------------------------------------------------

fn cmd_fit_ensemble(model_path: &Path, features: &Path, seed: u64) -> Result<(), CliError> {
    let started = Instant::now();
    let (model, mut container) = load_checkpoint(model_path)?;
    let text = std::fs::read_to_string(features)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", features.display())))?;
    let fm = FeatureMatrix::from_csv(&text)?;
    if fm.dim() != model.config.feature_dim() {
        return Err(CliError::Data(format!(
            "model produces {}-dimensional features but {} has {} columns",
            model.config.feature_dim(),
            features.display(),
            fm.dim()
        )));
    }
    let ensemble = train_ensemble(&fm, seed)?;
    container.put(SECTION_ENSEMBLE, ensemble.to_bytes());
    container.write(model_path)?;

    let mut manifest = RunManifest::new("fit-ensemble", seed);
    manifest.push("model", model_path.display());
    manifest.push("features", features.display());
    manifest.push("rows", fm.len());
    manifest.push("feature_dim", fm.dim());
    let ens_manifest = sibling_manifest(&model_path.with_file_name(format!(
        "{}.ensemble",
        model_path.file_stem().unwrap_or_default().to_string_lossy()
    )));
    manifest.write(&ens_manifest, started.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(
    model_path: &Path,
    data: &DataSource,
    split: SplitSel,
    seed: u64,
    report_dir: &Path,
    mode: Mode,
) -> Result<(), CliError> {
    let started = Instant::now();
    let (model, container) = load_checkpoint(model_path)?;
    let ensemble = match (mode, container.get(SECTION_ENSEMBLE)) {
        (Mode::Cnn, _) => None,
        (_, Some(payload)) => Some(ClassifierEnsemble::from_bytes(payload)?),
        (_, None) => {
            return Err(CliError::Data(format!(
                "{} has no ensemble section; run fit-ensemble first or use --mode cnn",
                model_path.display()
            )))
        }
    };

    let ds = data.load(model.config.side, seed)?;
    let plan = split_dataset(&ds, seed)?;
    let indices = split.indices(&plan);
    if indices.is_empty() {
        return Err(CliError::Data(format!("split {:?} is empty", split.name())));
    }

    let fm = extract_feature_matrix(&model, &ds, &indices)?;
    let mut rows = Vec::new();
    let mut roc_curves = Vec::new();
    let mut pr_curves = Vec::new();

    if mode != Mode::Ensemble {
        let (scores, labels) = score(&model, &ds, &indices)?;
        let preds: Vec<Label> = scores
            .iter()
            .map(|&s| if s > 0.5 { Label::Malware } else { Label::Benign })
            .collect();
        add_model_report(
            "cnn-softmax",
            &scores,
            &preds,
            &labels,
            &mut rows,
            &mut roc_curves,
            &mut pr_curves,
        )?;
    }
    if let Some(ens) = &ensemble {
        let preds = ens.predict(&fm.features)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let labels_pred: Vec<Label> = preds.iter().map(|p| p.label).collect();
        add_model_report(
            "dsbel-ensemble",
            &scores,
            &labels_pred,
            &fm.labels,
            &mut rows,
            &mut roc_curves,
            &mut pr_curves,
        )?;
    }

    create_dir(report_dir)?;
    write_metrics_csv(&rows, &report_dir.join("report.csv"))?;
    write_file(
        &report_dir.join("roc.svg"),
        &line_chart_svg("ROC", "false positive rate", "true positive rate", &roc_curves),
    )?;
    write_file(
        &report_dir.join("pr.svg"),
        &line_chart_svg("Precision-Recall", "recall", "precision", &pr_curves),
    )?;

    let x = to_f64(&fm.features);
    let pca = Pca::fit(&x, 3.min(fm.dim()))?;
    let projected_mat = pca.project(&x)?;
    let projected: Vec<Vec<f64>> = (0..projected_mat.rows)
        .map(|r| {
            let mut row = projected_mat.row(r).to_vec();
            row.resize(3, 0.0); // tiny models with < 3 feature dims
            row
        })
        .collect();
    write_file(
        &report_dir.join("pca.svg"),
        &pca_scatter_svg(&projected, &fm.labels),
    )?;

    let mut manifest = RunManifest::new("eval", seed);
    manifest.push("model", model_path.display());
    manifest.push("input", data.describe());
    manifest.push("split", split.name());
    manifest.push("rows", indices.len());
    manifest.push("mode", format!("{mode:?}").to_lowercase());
    for r in &rows {
        manifest.push(&format!("accuracy.{}", r.model), format!("{:.4}", r.metrics.accuracy));
    }
    manifest.push("output", report_dir.display());
    manifest.write(&report_dir.join("manifest.txt"), started.elapsed().as_secs_f64())
}

fn add_model_report(
    name: &str,
    scores: &[f64],
    preds: &[Label],
    labels: &[Label],
    rows: &mut Vec<ReportRow>,
    roc_curves: &mut Vec<NamedCurve>,
    pr_curves: &mut Vec<NamedCurve>,
) -> Result<(), CliError> {
    let cm = confusion(preds, labels)?;
    let mut metrics = compute_metrics(&cm)?;
    let (roc, auc) = roc_auc(scores, labels)?;
    let pr = pr_curve(scores, labels)?;
    metrics.auc = auc;
    rows.push(ReportRow { model: name.to_string(), metrics });
    roc_curves.push(NamedCurve { name: name.to_string(), points: roc.points, auc: Some(auc) });
    pr_curves.push(NamedCurve { name: name.to_string(), points: pr.points, auc: None });
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(history: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let text = std::fs::read_to_string(history)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", history.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "epoch,train_loss,train_acc,val_loss,val_acc" {
        return Err(CliError::Data(format!("{} is not a history CSV", history.display())));
    }
    let mut records: Vec<[f64; 5]> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Data(format!("bad history row: {line}")))?;
        if vals.len() != 5 {
            return Err(CliError::Data(format!("bad history row: {line}")));
        }
        records.push([vals[0], vals[1], vals[2], vals[3], vals[4]]);
    }
    if records.is_empty() {
        return Err(CliError::Data("history has no epochs".into()));
    }

    // normalize epochs to [0,1] on x; losses to [0,1] by the peak loss
    let n = records.len() as f64;
    let x_at = |i: usize| if records.len() == 1 { 0.0 } else { i as f64 / (n - 1.0) };
    let max_loss = records
        .iter()
        .flat_map(|r| [r[1], r[3]])
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let series = |col: usize, scale: f64| -> Vec<(f64, f64)> {
        records.iter().enumerate().map(|(i, r)| (x_at(i), r[col] / scale)).collect()
    };
    let loss_curves = vec![
        NamedCurve { name: "train loss".into(), points: series(1, max_loss), auc: None },
        NamedCurve { name: "val loss".into(), points: series(3, max_loss), auc: None },
    ];
    let acc_curves = vec![
        NamedCurve { name: "train accuracy".into(), points: series(2, 1.0), auc: None },
        NamedCurve { name: "val accuracy".into(), points: series(4, 1.0), auc: None },
    ];

    create_dir(out)?;
    write_file(
        &out.join("loss.svg"),
        &line_chart_svg("Training loss", "epoch (scaled)", "loss / peak loss", &loss_curves),
    )?;
    write_file(
        &out.join("accuracy.svg"),
        &line_chart_svg("Training accuracy", "epoch (scaled)", "accuracy", &acc_curves),
    )?;

    let mut manifest = RunManifest::new("report", 0);
    manifest.push("input", history.display());
    manifest.push("epochs", records.len());
    manifest.push("output", out.display());
    manifest.write(&out.join("manifest.txt"), started.elapsed().as_secs_f64())
}
