use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use effcnet::augment::{augment_batch, load_policy, AugPolicy};
use effcnet::checkpoint::{self, CheckpointMeta};
use effcnet::data::{load_cifar, DatasetKind, Split};
use effcnet::image::Image;
use effcnet::model::{CostReport, Model};
use effcnet::nn::softmax_rows;
use effcnet::train::{evaluate, train, MetricsRecord, RunConfig, RunDir};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "effcnet", version, about = "Train, evaluate and analyze EffCNet models on CIFAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Report top-1/top-5 accuracy of a checkpoint on a test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<String>,
        /// Test images per class; defaults to the subset used during training.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value_t = 200)]
        batch_size: usize,
    },
    /// Classify one 32x32 image (raw planar bytes or binary PPM).
    Classify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class names, one per line.
        #[arg(long)]
        labels: PathBuf,
        /// Print only the best N classes.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Print per-layer parameter and FLOP counts.
    Analyze {
        /// Run config (TOML) or checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Second model to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Write augmented copies of an image as PPM files.
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cifar10")]
    dataset: String,
    /// Training images per class (first N in file order).
    #[arg(long)]
    subset: Option<usize>,
    /// Test images per class; defaults to a fifth of --subset.
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides the policy named in the config.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Disable the augmentation policy.
    #[arg(long, conflicts_with = "policy")]
    no_policy: bool,
    /// Pad-4 random crop and horizontal flip.
    #[arg(long)]
    crop_flip: bool,
    /// Record zero wall time so repeated runs produce identical files.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    network: &'a effcnet::NetworkConfig,
    train: &'a effcnet::train::TrainConfig,
    data: DataSnapshot,
}

#[derive(Serialize)]
struct DataSnapshot {
    dataset: String,
    train_per_class: usize,
    test_per_class: usize,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_policy_file(path: &Path) -> Result<AugPolicy> {
    load_policy(&read_text(path)?).with_context(|| format!("policy {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::from_toml(&read_text(&args.config)?).with_context(|| format!("config {}", args.config.display()))?;
    let kind: DatasetKind = args.dataset.parse()?;
    if cfg.network.num_classes != kind.classes() {
        return Err(
            effcnet::Error::Config(format!("network has {} classes but {} has {}", cfg.network.num_classes, kind, kind.classes())).into()
        );
    }
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.seed = args.seed.unwrap_or(t.seed);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.lr = args.lr.unwrap_or(t.lr);
    t.crop_flip |= args.crop_flip;
    t.deterministic |= args.deterministic;
    let config_dir = args.config.parent().unwrap_or(Path::new("."));
    let policy_path = match (&args.policy, args.no_policy) {
        (_, true) => None,
        (Some(p), false) => Some(p.clone()),
        (None, false) => t.policy.as_ref().map(|p| config_dir.join(p)),
    };
    t.policy = policy_path.clone();
    t.validate()?;
    let policy = policy_path.as_deref().map(load_policy_file).transpose()?;

    let mut train_ds = load_cifar(&args.data, kind, Split::Train)?;
    let mut test_ds = load_cifar(&args.data, kind, Split::Test)?;
    let test_per_class = args.test_subset.or(args.subset.map(|n| (n / 5).max(1))).unwrap_or(0);
    if let Some(n) = args.subset {
        train_ds = train_ds.subset_per_class(n);
    }
    if test_per_class > 0 {
        test_ds = test_ds.subset_per_class(test_per_class);
    }

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let snapshot = Snapshot {
        network: &cfg.network,
        train: &cfg.train,
        data: DataSnapshot { dataset: kind.to_string(), train_per_class: args.subset.unwrap_or(0), test_per_class },
    };
    std::fs::write(args.out.join("config.snapshot"), toml::to_string(&snapshot)?)?;

    eprintln!("training on {} images, testing on {}", train_ds.len(), test_ds.len());
    let mut model = Model::<f32>::new(cfg.network.clone(), cfg.train.seed)?;
    let meta = CheckpointMeta { dataset: kind.to_string(), seed: cfg.train.seed, test_per_class, ..Default::default() };
    let started = Instant::now();
    println!("{}", MetricsRecord::HEADER);
    let outcome =
        train(&mut model, &train_ds, &test_ds, &cfg.train, policy.as_ref(), Some(RunDir { path: &args.out, meta }), |r| println!("{r}"))?;
    eprintln!(
        "best top-1 {} at epoch {}; {:.1} s total; run written to {}",
        outcome.metrics[outcome.best_epoch - 1].top1,
        outcome.best_epoch,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn kind_from_meta(meta: &CheckpointMeta) -> DatasetKind {
    meta.dataset.parse().unwrap_or(DatasetKind::Cifar10)
}

fn load_ckpt(path: &Path) -> Result<checkpoint::Loaded> {
    let loaded = checkpoint::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if !loaded.checksum_ok {
        eprintln!("warning: checksum mismatch in {}; weights may be corrupted", path.display());
    }
    Ok(loaded)
}

fn cmd_eval(ckpt: &Path, data: &Path, dataset: Option<String>, subset: Option<usize>, batch_size: usize) -> Result<()> {
    let loaded = load_ckpt(ckpt)?;
    let kind = match dataset {
        Some(d) => d.parse()?,
        None => kind_from_meta(&loaded.meta),
    };
    let mut ds = load_cifar(data, kind, Split::Test)?;
    let per_class = subset.unwrap_or(loaded.meta.test_per_class);
    if per_class > 0 {
        ds = ds.subset_per_class(per_class);
    }
    let r = evaluate(&loaded.model, &ds, &kind.normalization(), batch_size)?;
    println!("images {}", ds.len());
    println!("top1 {}", r.top1);
    println!("top5 {}", r.top5);
    println!("loss {}", r.loss);
    Ok(())
}

fn cmd_classify(ckpt: &Path, image: &Path, labels: &Path, top: Option<usize>) -> Result<()> {
    let loaded = load_ckpt(ckpt)?;
    let names: Vec<String> = read_text(labels)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let classes = loaded.model.config().num_classes;
    if names.len() != classes {
        return Err(effcnet::Error::Config(format!("{} class names for a {}-class model", names.len(), classes)).into());
    }
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let norm = kind_from_meta(&loaded.meta).normalization();

    let t0 = Instant::now();
    let img = Image::decode(&bytes)?;
    let x = norm.batch::<f32>([&img])?;
    let t1 = Instant::now();
    let logits = loaded.model.predict(&x)?;
    let t2 = Instant::now();

    let probs = softmax_rows(&logits.to_vec(), classes);
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    for (rank, &i) in order.iter().take(top.unwrap_or(classes)).enumerate() {
        println!("{:>3}. {:<16} {:.6}", rank + 1, names[i], probs[i]);
    }
    println!("preprocess {:.3} ms", (t1 - t0).as_secs_f64() * 1e3);
    println!("forward {:.3} ms", (t2 - t1).as_secs_f64() * 1e3);
    Ok(())
}

fn report_for(path: &Path) -> Result<CostReport> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = if bytes.starts_with(checkpoint::MAGIC) {
        checkpoint::decode(&bytes)?.model
    } else {
        let text = String::from_utf8(bytes).context("config is not UTF-8")?;
        let cfg = RunConfig::from_toml(&text).with_context(|| format!("config {}", path.display()))?;
        Model::<f32>::new(cfg.network, 0)?
    };
    Ok(model.count_params())
}

fn cmd_analyze(config: &Path, baseline: Option<&Path>, csv: bool) -> Result<()> {
    let report = report_for(config)?;
    let print = |r: &CostReport| if csv { print!("{}", r.to_csv()) } else { println!("{r}\n") };
    print(&report);
    if let Some(path) = baseline {
        let base = report_for(path)?;
        print(&base);
        let (a, b) = (report.total(), base.total());
        println!("{:<8} {:>14} {:>14} {:>8}", "", "model", "baseline", "ratio");
        for (name, x, y) in [("params", a.params, b.params), ("MACs", a.macs, b.macs), ("FLOPs", a.flops, b.flops)] {
            println!("{:<8} {:>14} {:>14} {:>8.3}", name, x, y, x as f64 / y as f64);
        }
    }
    Ok(())
}

fn cmd_augment_preview(image: &Path, policy: &Path, count: usize, out: &Path, seed: u64) -> Result<()> {
    let img = Image::decode(&std::fs::read(image).with_context(|| format!("reading {}", image.display()))?)?;
    let policy = load_policy_file(policy)?;
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let copies = augment_batch(&vec![img; count], &policy, &mut rng);
    for (i, c) in copies.iter().enumerate() {
        std::fs::write(out.join(format!("preview_{i:03}.ppm")), c.to_ppm())?;
    }
    println!("wrote {} images to {}", count, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { ckpt, data, dataset, subset, batch_size } => cmd_eval(&ckpt, &data, dataset, subset, batch_size),
        Command::Classify { ckpt, image, labels, top } => cmd_classify(&ckpt, &image, &labels, top),
        Command::Analyze { config, baseline, csv } => cmd_analyze(&config, baseline.as_deref(), csv),
        Command::AugmentPreview { image, policy, count, out, seed } => cmd_augment_preview(&image, &policy, count, &out, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
