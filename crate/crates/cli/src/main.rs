use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use vimkit::data::{
    self, class_names_from_manifest, generate_synthetic, load_dataset, read_manifest,
    stratified_split, write_dataset, write_manifest, LabeledDataset, Partition, PreparedSet, Split,
    SplitSpec, SynthSpec, SynthVariant,
};
use vimkit::eval::{
    count_flops, count_params, evaluate_scores, merge_report, score_predictions_file, EvalReport,
};
use vimkit::model::{load_checkpoint, Strategy, VimConfig, VimModel};
use vimkit::train::{evaluate_set, fit};
use vimkit::write_atomic;

mod settings;

use settings::{resolved, Settings};

const EVAL_BATCH: usize = 64;

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "vimkit",
    version,
    about = "Bidirectional state-space image classifier toolkit"
)]
struct Cli {
    /// key=value settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratified train/val/test split of a class-per-folder dataset.
    Split(SplitArgs),
    /// Train a model on the train/val partitions of a manifest.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions CSV and merge into the report tables.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Parameter and FLOP counts for a model configuration.
    Flops(FlopsArgs),
    /// Write a procedural texture dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest to write.
    #[arg(long)]
    out: PathBuf,
    /// train,val,test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// scratch, head-only, last-n=<N> or full.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Pretrained checkpoint; required unless training from scratch.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Output directory for checkpoints, log and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["ckpt", "predictions"])))]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, requires = "data")]
    ckpt: Option<PathBuf>,
    /// Dataset root, needed with --ckpt.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV of `sample_id,p_0,...,p_{K-1}` rows.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    partition: Partition,
    /// Row name in the tables; defaults to the input file stem.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value = "-")]
    strategy: String,
    /// Parameter count reported for a predictions file.
    #[arg(long, default_value_t = 0)]
    params: u64,
    /// FLOPs reported for a predictions file.
    #[arg(long, default_value_t = 0)]
    flops: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// Take the configuration from a checkpoint instead of the settings.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    A,
    B,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, value_enum, default_value = "a")]
    variant: Variant,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("VIMKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        usage(format!(
            "VIMKIT_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    if n == 0 {
        return Err(usage("VIMKIT_THREADS must be a positive integer"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(c) = &cli.config {
        require_file(c)?;
    }
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Split(a) => split(a),
        Command::Train(a) => train(a, settings),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Flops(a) => flops(a, settings),
        Command::Synth(a) => synth(a),
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("{}: no such directory", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("{}: no such file", p.display())));
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn split(a: SplitArgs) -> Result<()> {
    require_dir(&a.data)?;
    let spec = SplitSpec {
        ratios: [a.ratios[0], a.ratios[1], a.ratios[2]],
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(&a.data)?;
    let split = stratified_split(&ds, &spec)?;
    write_atomic(&a.out, write_manifest(&ds, &split).as_bytes())?;
    let config = format!(
        "data={}\nseed={}\nratios={},{},{}\n",
        a.data.display(),
        a.seed,
        spec.ratios[0],
        spec.ratios[1],
        spec.ratios[2]
    );
    write_atomic(sibling(&a.out, ".config"), config.as_bytes())?;
    print_class_table(&ds, &split);
    Ok(())
}

fn print_class_table(ds: &LabeledDataset, split: &Split) {
    let width = ds
        .class_names
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(5)
        .max(5);
    println!(
        "{:<width$} {:>6} {:>6} {:>6} {:>6}",
        "class", "train", "val", "test", "total"
    );
    let mut sum = (0, 0, 0);
    for (name, &(tr, va, te)) in ds.class_names.iter().zip(&split.class_table(ds)) {
        println!("{name:<width$} {tr:>6} {va:>6} {te:>6} {:>6}", tr + va + te);
        sum = (sum.0 + tr, sum.1 + va, sum.2 + te);
    }
    println!(
        "{:<width$} {:>6} {:>6} {:>6} {:>6}",
        "total",
        sum.0,
        sum.1,
        sum.2,
        sum.0 + sum.1 + sum.2
    );
}

fn load_split(data_dir: &Path, manifest: &Path) -> Result<(LabeledDataset, Split)> {
    require_dir(data_dir)?;
    require_file(manifest)?;
    let ds = load_dataset(data_dir)?;
    let entries = read_manifest(manifest)?;
    let split = Split::from_manifest(&ds, &entries)?;
    Ok((ds, split))
}

fn train(a: TrainArgs, mut settings: Settings) -> Result<()> {
    settings.set("strategy", a.strategy);
    settings.set("epochs", a.epochs);
    settings.set("seed", a.seed);
    settings.set("lr", a.lr);
    settings.set("batch_size", a.batch_size);
    settings.set("patience", a.patience);
    let mut tcfg = settings.train_config()?;
    if tcfg.strategy.needs_checkpoint() && a.init.is_none() {
        return Err(usage(format!("strategy {} requires --init", tcfg.strategy)));
    }
    if let Some(init) = &a.init {
        require_file(init)?;
    }
    let (ds, split) = load_split(&a.data, &a.manifest)?;

    let base = match &a.init {
        Some(p) => load_checkpoint::<f32>(p)?.config().clone(),
        None => VimConfig::toy(),
    };
    let mut mcfg = settings.model_config(base)?;
    mcfg.num_classes = ds.num_classes();
    let model_seed = settings.get("model_seed")?.unwrap_or(tcfg.seed);
    let model = VimModel::<f32>::new(mcfg.clone(), ds.class_names.clone(), model_seed)?;

    tcfg.init_checkpoint = a.init.clone();
    tcfg.checkpoint_dir = Some(a.out.clone());
    tcfg.validate().map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let extra = [
        ("data", a.data.display().to_string()),
        ("manifest", a.manifest.display().to_string()),
        (
            "init",
            a.init
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        ),
        ("model_seed", model_seed.to_string()),
    ];
    write_atomic(
        a.out.join("run_config.txt"),
        resolved(&mcfg, Some(&tcfg), &extra).as_bytes(),
    )?;

    let train_set = PreparedSet::new(&ds, &split.train, &mcfg)?;
    let val_set = PreparedSet::new(&ds, &split.val, &mcfg)?;
    let (model, log) = fit(model, &train_set, &val_set, &tcfg)?;
    write_atomic(a.out.join("train_log.jsonl"), log.to_jsonl().as_bytes())?;

    let mut summary = format!(
        "best_epoch={}\nepochs_run={}\n",
        log.best_epoch,
        log.epochs.len()
    );
    if let Some(best) = log.epochs.get(log.best_epoch.saturating_sub(1)) {
        summary.push_str(&format!(
            "val_loss={:.6}\nval_accuracy={:.6}\n",
            best.val_loss, best.val_acc
        ));
    }
    if split.test.is_empty() {
        log::warn!("test partition is empty; skipping test evaluation");
    } else {
        let test_set = PreparedSet::new(&ds, &split.test, &mcfg)?;
        let (loss, acc) = evaluate_set(&model, &test_set, EVAL_BATCH)?;
        summary.push_str(&format!("test_loss={loss:.6}\ntest_accuracy={acc:.6}\n"));
    }
    write_atomic(a.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.manifest)?;
    let report = match (&a.ckpt, &a.predictions) {
        (Some(ckpt), None) => {
            require_file(ckpt)?;
            let data_dir = a
                .data
                .as_deref()
                .ok_or_else(|| usage("--ckpt requires --data"))?;
            let (ds, split) = load_split(data_dir, &a.manifest)?;
            let model = load_checkpoint::<f32>(ckpt)?;
            if model.class_names() != ds.class_names.as_slice() {
                bail!(
                    "checkpoint classes {:?} differ from dataset classes {:?}",
                    model.class_names(),
                    ds.class_names
                );
            }
            let set = PreparedSet::new(&ds, split.get(a.partition), model.config())?;
            if set.is_empty() {
                bail!("{} partition is empty", a.partition);
            }
            let mut scores = Vec::with_capacity(set.len() * ds.num_classes());
            for (images, _) in set.chunks(EVAL_BATCH) {
                scores.extend(
                    model
                        .predict_proba(&images)?
                        .data()
                        .iter()
                        .map(|&v| v as f64),
                );
            }
            let name = a.model.clone().unwrap_or_else(|| stem(ckpt));
            evaluate_scores(
                &name,
                &a.strategy,
                &scores,
                &set.labels,
                model.class_names(),
                count_params(&model),
                count_flops(model.config()).total(),
            )?
        }
        (None, Some(preds)) => {
            require_file(preds)?;
            let entries = read_manifest(&a.manifest)?;
            let class_names = class_names_from_manifest(&entries)?;
            let expected: Vec<(String, usize)> = entries
                .iter()
                .filter(|e| e.partition == a.partition)
                .map(|e| (e.path.clone(), e.label))
                .collect();
            if expected.is_empty() {
                bail!("{} partition is empty", a.partition);
            }
            let name = a.model.clone().unwrap_or_else(|| stem(preds));
            score_predictions_file(
                preds,
                &expected,
                &class_names,
                &name,
                &a.strategy,
                a.params,
                a.flops,
            )?
        }
        _ => return Err(usage("pass exactly one of --ckpt or --predictions")),
    };
    merge_report(std::slice::from_ref(&report), &a.out)?;
    let config = format!(
        "manifest={}\nsource={}\npartition={}\nmodel={}\nstrategy={}\nparams={}\nflops={}\n",
        a.manifest.display(),
        a.ckpt
            .as_ref()
            .or(a.predictions.as_ref())
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        a.partition,
        report.model,
        report.strategy,
        report.params,
        report.flops
    );
    let name = sanitize(&format!("{}_{}", report.model, report.strategy));
    write_atomic(a.out.join(format!("eval_{name}.config")), config.as_bytes())?;
    print_report(&report);
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn print_report(r: &EvalReport) {
    let m = &r.metrics;
    println!(
        "model={} strategy={} samples={}",
        r.model,
        r.strategy,
        r.confusion.total()
    );
    println!("accuracy={:.6}", m.accuracy);
    println!("precision={:.6}", m.precision);
    println!("recall={:.6}", m.recall);
    println!("f1={:.6}", m.f1);
    println!("specificity={:.6}", m.specificity);
    println!("sensitivity={:.6}", m.sensitivity);
    match &r.auc {
        Some(a) => println!("auc={:.6}", a.macro_auc),
        None => println!("auc=nan"),
    }
    println!("params={}\nflops={}", r.params, r.flops);
}

fn predict(a: PredictArgs) -> Result<()> {
    require_file(&a.ckpt)?;
    require_file(&a.image)?;
    let model = load_checkpoint::<f32>(&a.ckpt)?;
    let img = data::read_gray(&a.image)?;
    let x = data::preprocess::<f32>(&img, model.config())?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let probs: Vec<f64> = model
        .predict_proba(&x.reshape(shape)?)?
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let best = vimkit::train::argmax(&probs);
    println!("class={}", model.class_names()[best]);
    for (name, p) in model.class_names().iter().zip(&probs) {
        println!("{name}\t{p:.6}");
    }
    Ok(())
}

fn flops(a: FlopsArgs, settings: Settings) -> Result<()> {
    let cfg = match &a.ckpt {
        Some(p) => {
            require_file(p)?;
            load_checkpoint::<f32>(p)?.config().clone()
        }
        None => settings.model_config(VimConfig::toy())?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let names = (0..cfg.num_classes).map(|i| format!("class{i}")).collect();
    let model = VimModel::<f32>::new(cfg.clone(), names, 0)?;
    let f = count_flops(&cfg);
    for (k, v) in cfg.to_pairs() {
        println!("{k}={v}");
    }
    println!("params={}", count_params(&model));
    println!("flops_patch_embed={}", f.patch_embed);
    println!("flops_encoder={}", f.encoder);
    println!("flops_head={}", f.head);
    println!("flops={}", f.total());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        variant: match a.variant {
            Variant::A => SynthVariant::A,
            Variant::B => SynthVariant::B,
        },
        ..SynthSpec::new(a.classes, a.per_class, a.size, a.seed)
    };
    let ds = generate_synthetic(&spec).map_err(|e| usage(e.to_string()))?;
    write_dataset(&ds, &a.out)?;
    let config = format!(
        "classes={}\nper_class={}\nsize={}\nseed={}\nvariant={:?}\n",
        spec.num_classes, spec.per_class, spec.image_size, spec.seed, spec.variant
    );
    write_atomic(a.out.join("synth.config"), config.as_bytes())?;
    println!(
        "wrote {} images in {} classes to {}",
        ds.len(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}
