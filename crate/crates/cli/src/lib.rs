//! The `csnet` command line.
//!
//! Every subcommand prints a human-readable summary to standard output and
//! writes machine-readable JSON/CSV files next to it. Failures print one line
//! `error: kind=<kind> msg=<message>` to standard error and exit with 1;
//! malformed invocations print usage and exit with 2.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use csnet::aeml::{
    average_params, compare_aeml_ensemble, select_top_t, EnsembleMode, EvalSettings, COMPARISON_CSV_HEADER, DEFAULT_T,
};
use csnet::autodiff::GradCheckConfig;
use csnet::episodes::{
    load_omniglot, read_dataset, sample_episode_seeded, synth_family, write_dataset, Dataset, OmniglotConfig, Split,
    SynthFamilyConfig,
};
use csnet::eval::{evaluate, run_ablation, EvalReport, RawNearestNeighbor, RunConfig};
use csnet::networks::ArchSpec;
use csnet::trainer::{
    episode_grad_check, train, validate, Checkpoint, CheckpointStore, ModelConfig, ModelParams, TrainingLog,
};
use csnet::{DType, Error, Real, Result};

pub const CACHE_ENV: &str = "CSNET_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".csnet-cache";

const RUN_CONFIG_FILE: &str = "config.json";
const RUN_LOG_FILE: &str = "train_log.csv";
const RUN_STORE_DIR: &str = "checkpoints";

#[derive(Parser, Debug)]
#[command(name = "csnet", version, about = "Few-shot class support networks: train, evaluate, average checkpoints")]
struct Cli {
    /// Directory for dataset caches when no explicit output path is given.
    #[arg(long, global = true, env = CACHE_ENV)]
    cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Gaussian task family and write it as a dataset cache.
    SynthGen(SynthGenArgs),
    /// Read an Omniglot directory tree into a dataset cache.
    IngestOmniglot(IngestArgs),
    /// Train from a run config; writes checkpoints and the training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the raw 1-NN baseline) on a fixed episode set.
    Eval(EvalArgs),
    /// Average the top-t validation checkpoints of a run into one checkpoint.
    Aeml(AemlArgs),
    /// Compare best checkpoint, averaged model and prediction ensemble.
    CompareEnsemble(CompareArgs),
    /// Run the support-embedding × AEML grid for each configured shot count.
    Ablate(AblateArgs),
    /// Check reverse-mode gradients of a fresh model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    within_scale: f64,
    #[arg(long, default_value_t = 64)]
    train_classes: usize,
    #[arg(long, default_value_t = 16)]
    val_classes: usize,
    #[arg(long, default_value_t = 20)]
    test_classes: usize,
    #[arg(long, default_value_t = 25)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default: <cache-dir>/synth.csnd).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Root of the alphabet/character/image tree.
    #[arg(long)]
    root: PathBuf,
    /// Skip the 90/180/270 degree rotation classes.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 1200)]
    train_chars: usize,
    #[arg(long, default_value_t = 100)]
    val_chars: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default: <cache-dir>/omniglot.csnd).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> DType {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    ProbAvg,
    MajorityVote,
}

impl From<ModeArg> for EnsembleMode {
    fn from(m: ModeArg) -> EnsembleMode {
        match m {
            ModeArg::ProbAvg => EnsembleMode::ProbAvg,
            ModeArg::MajorityVote => EnsembleMode::MajorityVote,
        }
    }
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 5)]
    way: usize,
    /// Defaults to the model's shot count.
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 2)]
    seed: u64,
}

impl EpisodeArgs {
    fn settings(&self, model_shot: Option<usize>) -> Result<EvalSettings> {
        let shot = match (self.shot, model_shot) {
            (Some(s), Some(m)) if s != m => {
                return Err(Error::Config(format!("--shot {s} does not match the {m}-shot model")))
            }
            (Some(s), _) => s,
            (None, Some(m)) => m,
            (None, None) => 1,
        };
        Ok(EvalSettings {
            split: self.split.into(),
            way: self.way,
            shot,
            queries: self.queries,
            episodes: self.episodes,
            seed: self.seed,
        })
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset cache to evaluate on.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint file to evaluate.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint.
    #[arg(long, value_parser = ["raw-1nn"])]
    baseline: Option<String>,
    /// Arithmetic precision used for the model.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Where to write the per-episode accuracies as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AemlArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = DEFAULT_T)]
    t: usize,
    /// Output checkpoint (default: <run>/aeml_t<t>.csnt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = DEFAULT_T)]
    t: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::ProbAvg)]
    mode: ModeArg,
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Where to write the JSON report (a CSV row is written alongside).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for ablation.json and ablation.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Mlp,
    Conv4,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::Mlp)]
    arch: ArchArg,
    /// Check without the class support re-embedding.
    #[arg(long)]
    no_class_support: bool,
    #[arg(long, default_value_t = 2)]
    shot: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", machine_error(&e));
            1
        }
    }
}

/// `error: kind=<kind> msg=<message>` on one line.
pub fn machine_error(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} msg={msg}", e.kind())
}

fn cache_dir(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| e.context(format!("loading dataset {}", path.display())))
}

fn dataset_summary(ds: &Dataset) -> String {
    let n = |s| ds.split_classes(s).len();
    format!(
        "{} classes ({} train / {} val / {} test), {} samples of shape {:?}",
        ds.classes().len(),
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        ds.num_samples(),
        ds.sample_shape()
    )
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let cache = cache_dir(&cli.cache_dir);
    match cli.command {
        Command::SynthGen(a) => {
            let cfg = SynthFamilyConfig {
                dim: a.dim,
                center_scale: a.center_scale,
                within_scale: a.within_scale,
                train_classes: a.train_classes,
                val_classes: a.val_classes,
                test_classes: a.test_classes,
                samples_per_class: a.samples,
                seed: a.seed,
            };
            let ds = synth_family(&cfg)?;
            let path = a.out.unwrap_or_else(|| cache.join("synth.csnd"));
            save_dataset(&ds, &path)?;
            writeln!(out, "wrote {}: {}", path.display(), dataset_summary(&ds))?;
        }
        Command::IngestOmniglot(a) => {
            let cfg = OmniglotConfig {
                augment_rotations: !a.no_augment,
                train_chars: a.train_chars,
                val_chars: a.val_chars,
                seed: a.seed,
            };
            let ds = load_omniglot(&a.root, &cfg)?;
            let path = a.out.unwrap_or_else(|| cache.join("omniglot.csnd"));
            save_dataset(&ds, &path)?;
            writeln!(out, "wrote {}: {}", path.display(), dataset_summary(&ds))?;
        }
        Command::Train(a) => {
            let cfg = RunConfig::from_json(&read_text(&a.config)?)?;
            let ds = cfg.dataset.load()?;
            cfg.validate_for(&ds)?;
            match cfg.train.precision {
                DType::F32 => train_run::<f32>(&cfg, &ds, &a.out, out)?,
                DType::F64 => train_run::<f64>(&cfg, &ds, &a.out, out)?,
            }
        }
        Command::Eval(a) => {
            let ds = load_dataset(&a.dataset)?;
            let report = match (&a.checkpoint, a.precision) {
                (Some(p), Precision::F32) => eval_checkpoint::<f32>(p, &ds, &a.episodes)?,
                (Some(p), Precision::F64) => eval_checkpoint::<f64>(p, &ds, &a.episodes)?,
                (None, _) => evaluate(&RawNearestNeighbor, "raw-1nn", &ds, &a.episodes.settings(None)?)?,
            };
            writeln!(out, "{}", report.summary())?;
            if let Some(p) = &a.report {
                write_file(p, &report.to_json())?;
            }
            if let Some(p) = &a.csv {
                write_file(p, &report.accuracies_csv())?;
            }
        }
        Command::Aeml(a) => {
            let run = RunFiles::open(&a.run)?;
            match run.config.train.precision {
                DType::F32 => aeml_run::<f32>(&run, a.t, a.out, out)?,
                DType::F64 => aeml_run::<f64>(&run, a.t, a.out, out)?,
            }
        }
        Command::CompareEnsemble(a) => {
            let run = RunFiles::open(&a.run)?;
            let ds = run.config.dataset.load()?;
            let sel = select_top_t(&run.log, &run.store, a.t)?;
            let eval = a.episodes.settings(Some(run.config.train.shot))?;
            let mode = a.mode.into();
            let report = match run.config.train.precision {
                DType::F32 => compare_aeml_ensemble::<f32>(&sel, &run.store, &ds, &eval, mode)?,
                DType::F64 => compare_aeml_ensemble::<f64>(&sel, &run.store, &ds, &eval, mode)?,
            };
            writeln!(out, "t={} mode={} episodes={} seed={}", report.t, report.mode, report.episodes, report.seed)?;
            writeln!(out, "  best single  {:.4}", report.acc_single)?;
            writeln!(out, "  aeml         {:.4}  ({:+.4})", report.acc_aeml, report.delta_aeml)?;
            writeln!(out, "  ensemble     {:.4}  ({:+.4})", report.acc_ensemble, report.delta_ensemble)?;
            if let Some(p) = &a.report {
                write_file(p, &serde_json::to_string_pretty(&report)?)?;
                write_file(&p.with_extension("csv"), &format!("{COMPARISON_CSV_HEADER}\n{}\n", report.csv_row()))?;
            }
        }
        Command::Ablate(a) => {
            let cfg = RunConfig::from_json(&read_text(&a.config)?)?;
            let ds = cfg.dataset.load()?;
            let report = run_ablation(&cfg, &ds)?;
            std::fs::create_dir_all(&a.out)?;
            write_file(&a.out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            write_file(&a.out.join("ablation.csv"), &report.to_csv())?;
            writeln!(out, "{:>5} {:>13} {:>5} {:>8} {:>8}", "shot", "class_support", "aeml", "mean", "ci95")?;
            for c in &report.cells {
                writeln!(
                    out,
                    "{:>5} {:>13} {:>5} {:>8.4} {:>8.4}",
                    c.shot, c.class_support, c.aeml, c.report.mean, c.report.ci95
                )?;
            }
            for d in &report.deltas {
                writeln!(out, "shot {} delta {} (given {}): {:+.4}", d.shot, d.factor, d.given, d.delta)?;
            }
        }
        Command::Gradcheck(a) => return gradcheck(&a, out),
    }
    Ok(0)
}

fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_dataset(ds, path).map_err(|e| e.context(format!("writing {}", path.display())))
}

fn train_run<T: Real>(cfg: &RunConfig, ds: &Dataset, dir: &Path, out: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join(RUN_CONFIG_FILE), &cfg.to_json())?;
    let mut store = CheckpointStore::create_dir(&dir.join(RUN_STORE_DIR))?;
    let outcome = train::<T>(&cfg.train, ds, &mut store)?;
    outcome.log.write_csv(&dir.join(RUN_LOG_FILE))?;
    let last = outcome.log.records().last().expect("initial record");
    writeln!(out, "trained {} episodes; {} checkpoints in {}", last.episode, store.len(), dir.join(RUN_STORE_DIR).display())?;
    for r in outcome.log.checkpoints() {
        writeln!(out, "  checkpoint {:>4}  episode {:>7}  val_acc {:.4}", r.checkpoint_id.unwrap_or(0), r.episode, r.val_acc.unwrap_or(f64::NAN))?;
    }
    Ok(())
}

fn eval_checkpoint<T: Real>(path: &Path, ds: &Dataset, ep: &EpisodeArgs) -> Result<EvalReport> {
    let ck = Checkpoint::<T>::load(path)?;
    let settings = ep.settings(Some(ck.model.shots))?;
    let name = if ck.provenance == "train" {
        format!("checkpoint {}", ck.id)
    } else {
        ck.provenance.clone()
    };
    evaluate(&ck.model, &name, ds, &settings)
}

struct RunFiles {
    dir: PathBuf,
    config: RunConfig,
    log: TrainingLog,
    store: CheckpointStore,
}

impl RunFiles {
    fn open(dir: &Path) -> Result<Self> {
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            config: RunConfig::from_json(&read_text(&dir.join(RUN_CONFIG_FILE))?)?,
            log: TrainingLog::read_csv(&dir.join(RUN_LOG_FILE))
                .map_err(|e| e.context(format!("reading {}", dir.join(RUN_LOG_FILE).display())))?,
            store: CheckpointStore::open_dir(&dir.join(RUN_STORE_DIR))?,
        })
    }
}

fn aeml_run<T: Real>(run: &RunFiles, t: usize, dest: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let sel = select_top_t(&run.log, &run.store, t)?;
    let model: ModelParams<T> = average_params(&sel, &run.store)?;
    let ds = run.config.dataset.load()?;
    let tc = &run.config.train;
    let val_acc = validate(&model, &ds, Split::Val, tc.way, tc.shot, tc.queries, tc.val_episodes, tc.val_seed)?;
    let ck = Checkpoint {
        id: run.store.entries().iter().map(|e| e.id + 1).max().unwrap_or(0),
        episode: *sel.episodes.iter().max().expect("t ≥ 1"),
        val_acc,
        wall_clock: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        provenance: format!("aeml(t={t})"),
        model,
        adam: None,
    };
    let path = dest.unwrap_or_else(|| run.dir.join(format!("aeml_t{t}.csnt")));
    ck.save(&path)?;
    writeln!(out, "averaged checkpoints {:?} (val acc {:?})", sel.ids, sel.val_accs)?;
    writeln!(out, "wrote {} (val acc {:.4})", path.display(), val_acc)?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let (arch, dim) = match a.arch {
        ArchArg::Mlp => (ArchSpec::Mlp { widths: vec![6, 16, 12] }, 6),
        ArchArg::Conv4 => (ArchSpec::Conv4 { input_shape: [1, 16, 16] }, 256),
    };
    let synth = synth_family(&SynthFamilyConfig {
        dim,
        train_classes: 8,
        val_classes: 1,
        test_classes: 1,
        samples_per_class: a.shot + 2,
        seed: a.seed,
        ..Default::default()
    })?;
    let ds = Dataset::new(arch.input_shape(), synth.classes().to_vec())?;
    let cfg = ModelConfig {
        arch,
        class_support: !a.no_class_support,
        channels: 4,
        seed: a.seed,
        ..Default::default()
    };
    let model = ModelParams::<f64>::build(&cfg, a.shot)?;
    let ep = sample_episode_seeded(&ds, Split::Train, 3, a.shot, 2, a.seed)?;
    let report = episode_grad_check(
        &model,
        &ds,
        &ep,
        &GradCheckConfig {
            samples: a.samples,
            seed: a.seed,
            tol: a.tol,
            ..Default::default()
        },
    )?;
    writeln!(
        out,
        "max_rel_err={:.3e} checked={} skipped_kinks={} params={}",
        report.max_rel_err,
        report.checked,
        report.skipped_kinks,
        model.param_count()
    )?;
    Ok(if report.max_rel_err <= a.tol { 0 } else { 1 })
}
