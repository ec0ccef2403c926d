mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use wavesense::checkpoint::{self, Checkpoint};
use wavesense::data::{assign_folds, load_dataset, prepare_windows, Dataset, EpochWindow, FoldAssignment, WindowRef};
use wavesense::evaluation::{metrics, ConfusionMatrix};
use wavesense::interpret::{
    build_prototype_cards, error_score_summary, explain, export_score_embeddings, record_occlusion, DEFAULT_NEAREST,
};
use wavesense::model::Model;
use wavesense::synth::generate_dataset;
use wavesense::training::{
    confusion_of, cross_validate, predict_windows, select_subjects, train_fold, Ensemble, EnsembleSpec, ScoredWindow,
    StopReason,
};
use wavesense::{Error, ErrorCategory, Result};

use crate::config::RunConfig;

const RUN_MANIFEST: &str = "run.json";
const MODEL_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "wavesense", version, about = "Prototype-based interpretable sleep staging")]
struct Cli {
    /// Base directory for relative input and output paths.
    #[arg(long, env = "WAVESENSE_ROOT", global = true)]
    root: Option<PathBuf>,

    /// TOML run configuration (sections: synth, model, train, split, occlusion).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any configuration value, e.g. `--set train.max_epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a planted-event log.
    Synth(SynthArgs),
    /// Train one fold and write its checkpoint.
    Train(TrainArgs),
    /// Train and test every fold; sum the test confusion matrices.
    Cv(CvArgs),
    /// Score a checkpoint on a set of windows.
    Eval(EvalArgs),
    /// Explain one window's prediction.
    Explain(ExplainArgs),
    /// Build prototype cards (nearest segments, occlusion interval, weights).
    Cards(CardsArgs),
    /// Evaluate a logit-sum ensemble of checkpoints.
    Ensemble(EnsembleArgs),
    /// Compare scores of correctly and wrongly classified windows.
    Errors(EvalArgs),
    /// Export per-window score vectors as CSV.
    ExportScores(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    /// Epochs per subject.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelFlags {
    /// Epochs per input window.
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Epochs between projections, or `off`.
    #[arg(long)]
    projection_period: Option<String>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct SplitFlags {
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    val_subjects: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fold: Option<usize>,
    #[command(flatten)]
    split: SplitFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only run these folds (comma separated).
    #[arg(long, value_delimiter = ',')]
    only: Vec<usize>,
    #[command(flatten)]
    split: SplitFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Part {
    /// Subjects the checkpoint neither trained nor validated on.
    Test,
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
struct Selection {
    #[arg(long)]
    data: PathBuf,
    /// Which subjects to use, relative to the checkpoint's training split.
    #[arg(long, value_enum, default_value = "test")]
    part: Part,
    /// Explicit subject list; overrides --part.
    #[arg(long, value_delimiter = ',')]
    subjects: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Window as SUBJECT:EPOCH, e.g. S00:17.
    #[arg(long)]
    window: String,
    /// Contributors listed per stage.
    #[arg(long, default_value_t = 3)]
    top: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CardsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NEAREST)]
    nearest: usize,
    /// Also store the occlusion intervals in the checkpoint's metadata.
    #[arg(long)]
    update_ckpt: bool,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    /// Member checkpoints (repeat or comma separate).
    #[arg(long = "member", value_delimiter = ',', required = true)]
    members: Vec<PathBuf>,
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    config: &'a RunConfig,
}

struct Ctx {
    root: Option<PathBuf>,
    cfg: RunConfig,
    argv: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn out_dir(&self, p: &Path) -> Result<PathBuf> {
        let dir = self.path(p);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn write_manifest(&self, dir: &Path, command: &str) -> Result<()> {
        let m = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: self.argv.clone(),
            config: &self.cfg,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))? + "\n";
        write_file(&dir.join(RUN_MANIFEST), &text)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) {
    if let Some(v) = f.window_len {
        cfg.model.data.window_len = v;
    }
    if let Some(v) = f.prototypes {
        cfg.model.num_prototypes = v;
    }
    if let Some(v) = f.dropout {
        cfg.model.features.mrcnn.dropout = v;
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.lr {
        t.optimizer.learning_rate = v;
    }
    if let Some(v) = f.patience {
        t.patience = v;
    }
    if let Some(v) = &f.projection_period {
        t.projection_period = match v.as_str() {
            "off" | "none" => None,
            n => Some(n.parse().map_err(|_| Error::Config(format!("--projection-period expects a number or off, got {n}")))?),
        };
    }
    if let Some(v) = f.lambda_l1 {
        t.loss.l1 = v;
    }
    apply_model_flags(cfg, &f.model);
    Ok(())
}

fn apply_split_flags(cfg: &mut RunConfig, f: &SplitFlags) {
    if let Some(v) = f.folds {
        cfg.split.folds = v;
    }
    if let Some(v) = f.val_subjects {
        cfg.split.val_subjects = v;
    }
    if let Some(v) = f.split_seed {
        cfg.split.seed = v;
    }
}

/// Dataset plus windows cut with the run's model input contract. Sampling
/// rate and epoch length come from the dataset itself.
fn load_windows(ctx: &mut Ctx, data: &Path) -> Result<(Dataset, Vec<EpochWindow>)> {
    let ds = load_dataset(&ctx.path(data))?;
    ctx.cfg.model.data.epoch_seconds = ds.epoch_seconds;
    ctx.cfg.model.data.sampling_hz = ds.sampling_hz;
    let windows = prepare_windows(&ds, &ctx.cfg.model.data)?;
    Ok((ds, windows))
}

fn folds_for(ctx: &Ctx, ds: &Dataset) -> Result<FoldAssignment> {
    let s = &ctx.cfg.split;
    let folds = assign_folds(&ds.subjects(), s.folds, s.val_subjects, s.seed)?;
    folds.audit()?;
    Ok(folds)
}

fn cmd_synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let s = &mut ctx.cfg.synth;
    if let Some(v) = a.subjects {
        s.subjects = v;
    }
    if let Some(v) = a.epochs {
        s.epochs_per_subject = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.noise_sd {
        s.noise_sd = v;
    }
    let dir = ctx.out_dir(&a.out)?;
    let data = generate_dataset(&ctx.cfg.synth, &dir)?;
    ctx.write_manifest(&dir, "synth")?;
    println!(
        "wrote {} subjects x {} epochs to {}",
        data.dataset.recordings.len(),
        ctx.cfg.synth.epochs_per_subject,
        dir.display()
    );
    Ok(())
}

fn cmd_train(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    apply_split_flags(&mut ctx.cfg, &a.split);
    if let Some(f) = a.fold {
        ctx.cfg.split.fold = f;
    }
    apply_train_flags(&mut ctx.cfg, &a.train)?;
    let (ds, windows) = load_windows(ctx, &a.data)?;
    let folds = folds_for(ctx, &ds)?;
    let fold = ctx.cfg.split.fold;
    if fold >= folds.fold_count {
        return Err(Error::Config(format!("fold {fold} out of range (k = {})", folds.fold_count)));
    }
    let train = select_subjects(&windows, &folds.train_subjects(fold));
    let val = select_subjects(&windows, folds.validation_subjects(fold));
    let dir = ctx.out_dir(&a.out)?;
    ctx.write_manifest(&dir, "train")?;
    let outcome = train_fold(&train, &val, &ctx.cfg.model, &ctx.cfg.train, Some(&dir.join("train.jsonl")))?;
    checkpoint::save(&dir.join(MODEL_FILE), &outcome.model, Some(&outcome.summary))?;
    let s = &outcome.summary;
    println!(
        "fold {fold}: {} epochs, best epoch {} (val loss {:.4}), stop: {:?}",
        s.epochs_run, s.best_epoch, s.best_val_loss, s.stop_reason
    );
    println!("checkpoint: {}", dir.join(MODEL_FILE).display());
    if let StopReason::Diverged(msg) = &s.stop_reason {
        return Err(Error::Numeric(format!("training diverged ({msg}); kept the best finite checkpoint")));
    }
    Ok(())
}

fn cmd_cv(ctx: &mut Ctx, a: &CvArgs) -> Result<()> {
    apply_split_flags(&mut ctx.cfg, &a.split);
    apply_train_flags(&mut ctx.cfg, &a.train)?;
    let (ds, windows) = load_windows(ctx, &a.data)?;
    let folds = folds_for(ctx, &ds)?;
    let dir = ctx.out_dir(&a.out)?;
    ctx.write_manifest(&dir, "cv")?;
    let which = (!a.only.is_empty()).then_some(a.only.as_slice());
    let cv = cross_validate(&windows, &folds, &ctx.cfg.model, &ctx.cfg.train, which, Some(&dir))?;
    for r in &cv.folds {
        let p = dir.join(format!("fold{}.ckpt", r.fold));
        checkpoint::save(&p, &r.outcome.model, Some(&r.outcome.summary))?;
        println!("fold {}: accuracy {:.4}, macro-F1 {:.4}", r.fold, r.metrics.accuracy, r.metrics.macro_f1);
    }
    write_metrics(&dir, &cv.aggregate)?;
    print!("{}", metrics(&cv.aggregate)?.to_text());
    Ok(())
}

fn load_ckpt(ctx: &Ctx, p: &Path) -> Result<Checkpoint> {
    checkpoint::load(&ctx.path(p))
}

/// Windows of the dataset matching the model's input contract.
fn model_windows(ctx: &Ctx, model: &Model, data: &Path) -> Result<Vec<EpochWindow>> {
    let ds = load_dataset(&ctx.path(data))?;
    let d = &model.cfg.data;
    if ds.epoch_seconds != d.epoch_seconds || ds.sampling_hz != d.sampling_hz {
        return Err(Error::Validation(format!(
            "dataset has {} s epochs at {} Hz; the model expects {} s at {} Hz",
            ds.epoch_seconds, ds.sampling_hz, d.epoch_seconds, d.sampling_hz
        )));
    }
    prepare_windows(&ds, d)
}

fn select(ckpt: &Checkpoint, windows: &[EpochWindow], sel: &Selection) -> Result<Vec<EpochWindow>> {
    let picked = if !sel.subjects.is_empty() {
        select_subjects(windows, &sel.subjects)
    } else {
        let summary = ckpt.training.as_ref();
        let train: BTreeSet<&str> = summary.map(|s| s.train_subjects.iter().map(String::as_str).collect()).unwrap_or_default();
        let val: BTreeSet<&str> = summary.map(|s| s.val_subjects.iter().map(String::as_str).collect()).unwrap_or_default();
        if sel.part != Part::All && summary.is_none() {
            return Err(Error::Validation("checkpoint has no training record; pass --subjects or --part all".into()));
        }
        windows
            .iter()
            .filter(|w| {
                let s = w.subject_id();
                match sel.part {
                    Part::All => true,
                    Part::Train => train.contains(s),
                    Part::Val => val.contains(s),
                    Part::Test => !train.contains(s) && !val.contains(s),
                }
            })
            .cloned()
            .collect()
    };
    if picked.is_empty() {
        return Err(Error::Validation("no windows match the subject selection".into()));
    }
    Ok(picked)
}

fn write_metrics(dir: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let m = metrics(cm)?;
    write_file(&dir.join("confusion.txt"), &cm.to_text())?;
    write_file(&dir.join("metrics.txt"), &m.to_text())?;
    write_file(&dir.join("metrics.csv"), &m.to_csv())
}

fn write_predictions(dir: &Path, scored: &[ScoredWindow]) -> Result<()> {
    let mut text = String::new();
    for s in scored {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    write_file(&dir.join("predictions.jsonl"), &text)
}

fn cmd_eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let ckpt = load_ckpt(ctx, &a.ckpt)?;
    let windows = select(&ckpt, &model_windows(ctx, &ckpt.model, &a.sel.data)?, &a.sel)?;
    let scored = predict_windows(&ckpt.model, &windows)?;
    let cm = confusion_of(&scored)?;
    if let Some(out) = &a.out {
        let dir = ctx.out_dir(out)?;
        ctx.write_manifest(&dir, "eval")?;
        write_metrics(&dir, &cm)?;
        write_predictions(&dir, &scored)?;
    }
    print!("{}\n{}", cm.to_text(), metrics(&cm)?.to_text());
    Ok(())
}

fn parse_window(spec: &str) -> Result<WindowRef> {
    let (subject, epoch) = spec
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("window {spec:?} is not SUBJECT:EPOCH")))?;
    let epoch_index = epoch.parse().map_err(|_| Error::Config(format!("bad epoch index in {spec:?}")))?;
    Ok(WindowRef { subject_id: subject.to_string(), epoch_index })
}

fn cmd_explain(ctx: &mut Ctx, a: &ExplainArgs) -> Result<()> {
    let ckpt = load_ckpt(ctx, &a.ckpt)?;
    let wanted = parse_window(&a.window)?;
    let windows = model_windows(ctx, &ckpt.model, &a.data)?;
    let window = windows
        .iter()
        .find(|w| w.window == wanted)
        .ok_or_else(|| Error::Validation(format!("window {wanted} is not in the dataset")))?;
    let report = explain(&ckpt.model, window, a.top)?;
    if let Some(out) = &a.out {
        let dir = ctx.out_dir(out)?;
        ctx.write_manifest(&dir, "explain")?;
        let stem = format!("{}_{}", wanted.subject_id, wanted.epoch_index);
        write_file(&dir.join(format!("{stem}.txt")), &report.to_text())?;
        write_file(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&dir.join(format!("{stem}.json")), &json)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_cards(ctx: &mut Ctx, a: &CardsArgs) -> Result<()> {
    let path = ctx.path(&a.ckpt);
    let mut ckpt = checkpoint::load(&path)?;
    let windows = model_windows(ctx, &ckpt.model, &a.data)?;
    let sel = Selection { data: a.data.clone(), part: Part::Train, subjects: Vec::new() };
    let train = select(&ckpt, &windows, &sel)?;
    let cards = build_prototype_cards(&ckpt.model, &train, a.nearest, &ctx.cfg.occlusion)?;
    let dir = ctx.out_dir(&a.out)?;
    ctx.write_manifest(&dir, "cards")?;
    let text: String = cards.iter().map(|c| c.to_text()).collect();
    write_file(&dir.join("cards.txt"), &text)?;
    let json = serde_json::to_string_pretty(&cards).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("cards.json"), &json)?;
    let mut curves = String::from("prototype,position,onset_s,sensitivity\n");
    let stride = ctx.cfg.occlusion.stride_s;
    for c in &cards {
        for (i, v) in c.occlusion.sensitivity.iter().enumerate() {
            curves.push_str(&format!("{},{i},{},{v}\n", c.prototype, i as f64 * stride));
        }
    }
    write_file(&dir.join("occlusion.csv"), &curves)?;
    if a.update_ckpt {
        record_occlusion(&mut ckpt.model, &cards);
        checkpoint::save(&path, &ckpt.model, ckpt.training.as_ref())?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_ensemble(ctx: &mut Ctx, a: &EnsembleArgs) -> Result<()> {
    let spec = EnsembleSpec { members: a.members.iter().map(|p| ctx.path(p)).collect() };
    let ensemble = Ensemble::load(&spec)?;
    let first = checkpoint::load(&spec.members[0])?;
    let windows = select(&first, &model_windows(ctx, &first.model, &a.sel.data)?, &a.sel)?;
    let mut cm = ConfusionMatrix::default();
    for w in &windows {
        cm.record(w.label, ensemble.predict(w.signal())?.predicted)?;
    }
    if let Some(out) = &a.out {
        let dir = ctx.out_dir(out)?;
        ctx.write_manifest(&dir, "ensemble")?;
        let json = serde_json::to_string_pretty(&spec).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&dir.join("ensemble.json"), &json)?;
        write_metrics(&dir, &cm)?;
    }
    print!("{}\n{}", cm.to_text(), metrics(&cm)?.to_text());
    Ok(())
}

fn scored_selection(ctx: &Ctx, a: &EvalArgs) -> Result<Vec<ScoredWindow>> {
    let ckpt = load_ckpt(ctx, &a.ckpt)?;
    let windows = select(&ckpt, &model_windows(ctx, &ckpt.model, &a.sel.data)?, &a.sel)?;
    predict_windows(&ckpt.model, &windows)
}

fn cmd_errors(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let summary = error_score_summary(&scored_selection(ctx, a)?)?;
    if let Some(out) = &a.out {
        let dir = ctx.out_dir(out)?;
        ctx.write_manifest(&dir, "errors")?;
        write_file(&dir.join("error_scores.csv"), &summary.to_csv())?;
    }
    print!("{}", summary.to_text());
    Ok(())
}

fn cmd_export_scores(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let csv = export_score_embeddings(&scored_selection(ctx, a)?);
    match &a.out {
        Some(out) => {
            let dir = ctx.out_dir(out)?;
            ctx.write_manifest(&dir, "export-scores")?;
            write_file(&dir.join("scores.csv"), &csv)?;
            println!("wrote {} rows to {}", csv.lines().count() - 1, dir.join("scores.csv").display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let config_path = cli.config.as_ref().map(|p| match &cli.root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.clone(),
    });
    let cfg = config::resolve(config_path.as_deref(), &cli.overrides)?;
    let mut ctx = Ctx { root: cli.root, cfg, argv };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Cv(a) => cmd_cv(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::Explain(a) => cmd_explain(&mut ctx, a),
        Command::Cards(a) => cmd_cards(&mut ctx, a),
        Command::Ensemble(a) => cmd_ensemble(&mut ctx, a),
        Command::Errors(a) => cmd_errors(&mut ctx, a),
        Command::ExportScores(a) => cmd_export_scores(&mut ctx, a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Numeric => 5,
        ErrorCategory::Io => 6,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        // usage errors exit with 2, help and version with 0
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
