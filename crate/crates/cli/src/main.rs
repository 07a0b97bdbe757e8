use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cdmamba::blocks::{GateActivation, LgfMultiplier};
use cdmamba::checkpoint;
use cdmamba::config::RunConfig;
use cdmamba::data::{self, Mask, SamplePair, SplitManifest};
use cdmamba::model::CdMamba;
use cdmamba::render;
use cdmamba::train::{self, confusion, metrics, ConfusionCounts, EpochRecord};
use cdmamba::verify::{self, Scope};
use cdmamba::Error;

/// Bi-temporal change detection with selective state-space blocks.
#[derive(Parser)]
#[command(name = "cdmamba", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, the epoch log and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train every ablation variant in turn and write one summary CSV.
        #[arg(long)]
        ablate: bool,
    },
    /// Report Pre/Rec/F1/IoU/OA of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to the data the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Manifest split to use when the dataset has one.
        #[arg(long)]
        split: Option<String>,
    },
    /// Write predicted masks, plus confusion overlays where labels exist.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `A/`, `B/` and optionally `label/`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// primitives, ssm, blocks, model or all (the default).
        #[arg(long)]
        scope: Option<String>,
    },
    /// Write a synthetic dataset in the on-disk layout.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// 1 usage/config, 2 data or runtime, 3 verification.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Usage(_)) => 1,
        _ => 2,
    }
}

/// Worker cap from `CDMAMBA_THREADS`, else the available parallelism.
fn worker_count() -> Result<usize> {
    match std::env::var("CDMAMBA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("CDMAMBA_THREADS must be a positive integer, got `{v}`")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every item on up to `workers` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> cdmamba::Result<R> + Sync,
) -> cdmamba::Result<Vec<R>> {
    let chunk = items.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<cdmamba::Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn split_ids(root: &Path, split: Option<&str>) -> Result<Vec<String>> {
    match split {
        None | Some("all") => Ok(data::list_ids(root)?),
        Some(name) => {
            if !has_manifest(Some(root)) {
                return Err(Error::Data(format!("{} has no split manifest", root.display())).into());
            }
            let m = SplitManifest::read(root)?;
            m.validate(None)?;
            Ok(match name {
                "train" => m.train,
                "val" => m.val,
                "test" => m.test,
                other => return Err(Error::Usage(format!("unknown split `{other}` (train, val, test, all)")).into()),
            })
        }
    }
}

/// The samples a run configuration describes.
fn load_dataset(cfg: &RunConfig, root: Option<&Path>, split: Option<&str>) -> Result<Vec<SamplePair>> {
    let samples = match root {
        None if cfg.synthetic => data::synth_generate(cfg.n, cfg.size, cfg.train.seed)?,
        None => {
            return Err(Error::Config("no dataset: set `data_dir` or `synthetic = true`".into()).into());
        }
        Some(root) => {
            if !root.is_dir() {
                return Err(Error::Data(format!("dataset directory {} does not exist", root.display())).into());
            }
            let ids = split_ids(root, split)?;
            if ids.is_empty() {
                return Err(Error::Data(format!("no image pairs under {}", root.join("A").display())).into());
            }
            ids.iter()
                .map(|id| data::load_pair(root, id))
                .collect::<cdmamba::Result<Vec<_>>>()?
        }
    };
    if cfg.patch == 0 {
        return Ok(samples);
    }
    let mut out = Vec::new();
    for s in &samples {
        out.extend(data::patch_split(s, cfg.patch)?);
    }
    Ok(out)
}

fn dataset_for(cfg: &RunConfig) -> Result<Vec<SamplePair>> {
    let root = if cfg.synthetic { None } else { cfg.data_dir.as_deref() };
    load_dataset(cfg, root, root.map(|_| "train").filter(|_| has_manifest(root)))
}

fn has_manifest(root: Option<&Path>) -> bool {
    root.is_some_and(|r| SplitManifest::FILES.iter().all(|f| r.join(f).exists()))
}

struct TrainOutcome {
    records: Vec<EpochRecord>,
    parameters: usize,
    final_counts: ConfusionCounts,
}

fn train_one(cfg: &RunConfig, data: &[SamplePair], out: &Path, quiet: bool) -> Result<TrainOutcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.txt"), cfg.to_text())?;
    let (model, mut store) = CdMamba::new(&cfg.model, cfg.train.seed)?;
    let mut log = BufWriter::new(File::create(out.join("log.csv"))?);
    writeln!(log, "{}", EpochRecord::CSV_HEADER)?;
    let start = Instant::now();
    let epochs = cfg.train.epochs;
    let summary = train::train(&model, &mut store, data, &cfg.train, |r| {
        writeln!(log, "{}", r.csv_line())?;
        if !quiet {
            eprintln!(
                "epoch {:>4}/{epochs}  loss {:.4}  (ce {:.4}, dice {:.4})  {}  [{:.1}s]",
                r.epoch,
                r.total,
                r.ce,
                r.dice,
                r.metrics,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&out.join("model.ckpt"), cfg, &store)?;
    checkpoint::save(&out.join("best.ckpt"), cfg, &summary.best_params)?;
    let (final_counts, _) = train::evaluate(&model, &store, data)?;
    if !quiet {
        eprintln!(
            "best epoch {} ; final weights on the training set: {}",
            summary.best_epoch,
            metrics(&final_counts)
        );
    }
    Ok(TrainOutcome {
        records: summary.records,
        parameters: store.num_scalars(),
        final_counts,
    })
}

/// Settings swept by `train --ablate`, each applied on top of the base config.
fn ablation_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = vec![("base".to_string(), base.clone())];
    let mut v = base.clone();
    v.model.aglgf_stages.clear();
    out.push(("no_aglgf".into(), v));
    for gate in [
        GateActivation::Relu,
        GateActivation::Silu,
        GateActivation::LeakyRelu,
        GateActivation::Sigmoid,
    ] {
        let mut v = base.clone();
        v.model.gate = gate;
        out.push((format!("gate_{gate}"), v));
    }
    for m in [LgfMultiplier::One, LgfMultiplier::OneAndHalf, LgfMultiplier::Two] {
        let mut v = base.clone();
        v.model.lgf_multiplier = m;
        out.push((format!("lgf_x{m}"), v));
    }
    for (l1, l2) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (1.0, 1.0)] {
        let mut v = base.clone();
        v.train.loss.lambda1 = l1;
        v.train.loss.lambda2 = l2;
        out.push((format!("loss_{l1}_{l2}"), v));
    }
    out
}

fn cmd_train(common: &Common, ablate: bool) -> Result<()> {
    let cfg = common.resolve()?;
    let data = dataset_for(&cfg)?;
    eprintln!(
        "training on {} samples of {}x{} for {} epochs (batch {}, seed {})",
        data.len(),
        data[0].size().1,
        data[0].size().0,
        cfg.train.epochs,
        cfg.train.batch_size,
        cfg.train.seed
    );
    if !ablate {
        train_one(&cfg, &data, &cfg.out_dir, false)?;
        println!("wrote {}", cfg.out_dir.display());
        return Ok(());
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = BufWriter::new(File::create(cfg.out_dir.join("ablation.csv"))?);
    writeln!(csv, "variant,parameters,initial_loss,final_loss,precision,recall,f1,iou,oa")?;
    for (name, variant) in ablation_variants(&cfg) {
        eprintln!("variant {name}");
        let o = train_one(&variant, &data, &cfg.out_dir.join(&name), true)?;
        let m = metrics(&o.final_counts);
        let (first, last) = (o.records.first().expect("epochs ≥ 1"), o.records.last().expect("epochs ≥ 1"));
        writeln!(
            csv,
            "{name},{},{},{},{},{},{},{},{}",
            o.parameters, first.total, last.total, m.precision, m.recall, m.f1, m.iou, m.oa
        )?;
        eprintln!("  {} parameters, {m}", o.parameters);
    }
    csv.flush()?;
    println!("wrote {}", cfg.out_dir.join("ablation.csv").display());
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path, data_dir: Option<&Path>, split: Option<&str>) -> Result<()> {
    let (stored, model, store) = checkpoint::load(ckpt)?;
    // Dataset settings come from --config when given, else from the checkpoint.
    let mut cfg = if common.config.is_some() { common.resolve()? } else { stored.clone() };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let root = match data_dir {
        Some(root) => Some(root.to_path_buf()),
        None if cfg.synthetic => None,
        None => cfg.data_dir.clone(),
    };
    let split = split.or(has_manifest(root.as_deref()).then_some("test"));
    let samples = load_dataset(&cfg, root.as_deref(), split)?;
    let workers = worker_count()?;
    let per_sample = parallel_map(&samples, workers, |s| {
        model.cfg.check_input_size(s.size().0, s.size().1)?;
        confusion(&train::predict(&model, &store, &s.t1, &s.t2)?, &s.gt.data)
    })?;
    let counts = per_sample.into_iter().fold(ConfusionCounts::default(), |mut a, c| {
        a += c;
        a
    });
    let m = metrics(&counts);
    let empty = samples.iter().filter(|s| s.gt.count_ones() == 0).count();
    let report = format!(
        "{m}\nsamples {}  empty-label samples {empty}  degenerate metrics {}\nTP {}  TN {}  FP {}  FN {}\n",
        samples.len(),
        m.degenerate,
        counts.tp,
        counts.tn,
        counts.fp,
        counts.fn_
    );
    print!("{report}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.txt"), &report)?;
    }
    Ok(())
}

fn cmd_predict(common: &Common, ckpt: &Path, root: &Path) -> Result<()> {
    let (stored, model, store) = checkpoint::load(ckpt)?;
    let out = common.out.clone().unwrap_or_else(|| stored.out_dir.join("predictions"));
    let ids = data::list_ids(root)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("no image pairs under {}", root.join("A").display())).into());
    }
    fs::create_dir_all(out.join("masks"))?;
    let with_gt = ids.iter().filter(|id| data::label_exists(root, id)).count();
    if with_gt > 0 {
        fs::create_dir_all(out.join("overlays"))?;
    }
    let workers = worker_count()?;
    let written = parallel_map(&ids, workers, |id| {
        let (t1, t2) = data::load_images(root, id)?;
        let (h, w) = (t1.shape()[1], t1.shape()[2]);
        model.cfg.check_input_size(h, w)?;
        let pred = Mask::new(h, w, train::predict(&model, &store, &t1, &t2)?)?;
        render::mask_image(&pred).save(out.join("masks").join(format!("{id}.png")))?;
        if !data::label_exists(root, id) {
            return Ok(false);
        }
        let gt = data::load_label(root, id, h, w)?;
        render::confusion_overlay(&pred, &gt)?.save(out.join("overlays").join(format!("{id}.png")))?;
        Ok(true)
    })?;
    let overlays = written.iter().filter(|&&b| b).count();
    if overlays < ids.len() {
        eprintln!(
            "note: {} of {} pairs have no label; overlays skipped for them",
            ids.len() - overlays,
            ids.len()
        );
    }
    println!("{} masks, {overlays} overlays in {}", ids.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(scope: Option<&str>) -> Result<()> {
    let scopes = match scope {
        None | Some("all") => Scope::ALL.to_vec(),
        Some(s) => vec![s.parse::<Scope>()?],
    };
    let start = Instant::now();
    let mut failed = Vec::new();
    for s in scopes {
        let report = verify::run_scope(s)?;
        println!("{report}");
        if !report.passed() {
            failed.push(s.to_string());
        }
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        bail!(VerificationFailed(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let out = &cfg.out_dir;
    let samples = data::synth_generate(cfg.n, cfg.size, cfg.train.seed)?;
    for s in &samples {
        data::write_pair(out, s)?;
    }
    println!("wrote {} pairs of {}x{} to {}", samples.len(), cfg.size, cfg.size, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, ablate } => cmd_train(common, *ablate),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => cmd_eval(common, checkpoint, data.as_deref(), split.as_deref()),
        Command::Predict {
            common,
            checkpoint,
            data,
        } => cmd_predict(common, checkpoint, data),
        Command::Gradcheck { scope } => cmd_gradcheck(scope.as_deref()),
        Command::Synth { common } => cmd_synth(common),
    }
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
