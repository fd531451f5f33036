use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use selfrel::config::{Precision, TrainConfig};
use selfrel::container::{Container, CHECKPOINT_MAGIC};
use selfrel::data_io::{load_datasets, load_image, Dataset};
use selfrel::evaluation::{self, ablation_table, Axis, HeatmapQuery, ProbeConfig};
use selfrel::numerics::Real;
use selfrel::trainer::{checkpoint_config, StepReport, Trainer};

const AFTER_HELP: &str = "\
Config files hold `key = value` lines with `#` comments; every key has a
default (run `selfrel keys` to list them). Exit codes: 0 success, 1 usage or
configuration error, 2 runtime error.

The ablation table is tab-separated with columns: cell, digest,
pixel_diff_mean, pixel_diff_sd, channel_diff_mean, channel_diff_sd,
probe_acc_mean, probe_acc_sd (means and sample deviations over seeds).";

#[derive(Parser)]
#[command(name = "selfrel", version, about = "Self-relation self-supervised training for tiny vision transformers", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set relation.t_p=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set trainer.seed=N` (train, ablate) or `eval.seed=N` (eval).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for visualize).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints, the metrics log and the resolved config.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint's teacher encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
        #[command(flatten)]
        common: Common,
    },
    /// Render a relation heatmap for one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `pixel:INDEX` or `channel`.
        #[arg(long)]
        query: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate a grid of configurations.
    Ablate {
        /// `KEY=V1,V2,...` with KEY one of M, t_p, t_c, temps (values t_p:t_c),
        /// asymmetric, losses (values like I+p+c), enable_image, enable_pixel,
        /// enable_channel. Each axis varies alone from the base config.
        #[arg(long = "axis")]
        axes: Vec<String>,
        /// Comma-separated seeds; defaults to `--seed` or the config's seed.
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// List every configuration key with its default.
    Keys,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Relations,
    Probe,
}

/// Errors the user can fix by changing the invocation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: selfrel::Error) -> anyhow::Error {
    match e {
        selfrel::Error::Config(_) => anyhow!(Usage(e.to_string())),
        other => other.into(),
    }
}

fn resolve_config(common: &Common, base: TrainConfig, seed_key: &str) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text).map_err(usage)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!(Usage(format!("--set expects KEY=VALUE, got `{kv}`"))))?;
        cfg.set(k.trim(), v).map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string()).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| anyhow!(Usage("--out is required".into())))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn ssl_images(cfg: &TrainConfig, train: &Dataset) -> Dataset {
    match cfg.data.train_subset_per_class {
        0 => train.clone(),
        n => train.take_per_class(n),
    }
}

fn read_checkpoint(path: &Path) -> Result<(Container, TrainConfig)> {
    let c = Container::read(path, CHECKPOINT_MAGIC).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = checkpoint_config(&c).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((c, cfg))
}

#[derive(Default)]
struct EpochSummary {
    n: usize,
    image: f64,
    pixel: f64,
    channel: f64,
    total: f64,
}

impl EpochSummary {
    fn add(&mut self, r: &StepReport) {
        self.n += 1;
        self.image += r.loss.image;
        self.pixel += r.loss.pixel;
        self.channel += r.loss.channel;
        self.total += r.loss.total;
    }

    fn line(&self, epoch: u64) -> String {
        let n = self.n.max(1) as f64;
        format!(
            "epoch {epoch}: loss_image {:.4} loss_pixel {:.4} loss_channel {:.4} loss_total {:.4}",
            self.image / n,
            self.pixel / n,
            self.channel / n,
            self.total / n
        )
    }
}

fn train<T: Real>(cfg: TrainConfig, resume: Option<&Path>, out: &Path) -> Result<()> {
    let (train, _) = load_datasets(&cfg.data).map_err(usage)?;
    let ssl = ssl_images(&cfg, &train);
    if ssl.is_empty() {
        bail!("training split is empty");
    }
    let mut tr = match resume {
        Some(p) => {
            let (c, stored) = read_checkpoint(p)?;
            if stored != cfg {
                bail!("checkpoint {} was written with a different configuration (digest {})", p.display(), stored.digest_hex());
            }
            Trainer::<T>::from_container(cfg.clone(), ssl.len(), &c)?
        }
        None => Trainer::<T>::new(cfg.clone(), ssl.len())?,
    };
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let log_path = out.join("metrics.log");
    let mut log = if resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let spe = tr.steps_per_epoch();
    let mut summary = EpochSummary::default();
    while !tr.is_done() {
        let r = tr.step(&ssl.images)?;
        writeln!(log, "{}", r.log_line())?;
        summary.add(&r);
        if tr.state.step % spe == 0 {
            let epoch = r.epoch;
            println!("{}", summary.line(epoch));
            summary = EpochSummary::default();
            let every = cfg.checkpoint_every as u64;
            if every > 0 && (epoch + 1) % every == 0 {
                tr.save_checkpoint(&out.join(format!("checkpoint_epoch{:03}.srlt", epoch + 1)))?;
            }
        }
    }
    log.flush()?;
    tr.save_checkpoint(&out.join("checkpoint.srlt"))?;
    println!("wrote {}", out.join("checkpoint.srlt").display());
    Ok(())
}

fn eval<T: Real>(cfg: TrainConfig, c: &Container, which: Which, out: &Path) -> Result<()> {
    let (train, val) = load_datasets(&cfg.data).map_err(usage)?;
    let n = ssl_images(&cfg, &train).len().max(1);
    let tr = Trainer::<T>::from_container(cfg.clone(), n, c)?;
    let params = &tr.state.teacher.params;
    match which {
        Which::Relations => {
            let rep = evaluation::relation_difference(
                &tr.model,
                params,
                &val.images,
                cfg.eval.relation_pairs,
                cfg.eval.seed,
                &cfg.augment,
                cfg.loss.relation_heads,
                cfg.loss.gg_grid,
                &cfg.digest_hex(),
            )?;
            let text = rep.to_text();
            fs::write(out.join("relations.txt"), &text)?;
            print!("{text}");
        }
        Which::Probe => {
            let rep = evaluation::linear_probe(&tr.model, params, &train, &val, &ProbeConfig::from_train(&cfg))?;
            let text = format!(
                "accuracy = {}\ntrain_accuracy = {}\nclasses = {}\nconfig_digest = {}\n",
                rep.accuracy,
                rep.train_accuracy,
                rep.classes,
                cfg.digest_hex()
            );
            fs::write(out.join("probe.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn parse_query(q: &str) -> Result<HeatmapQuery> {
    if q == "channel" {
        return Ok(HeatmapQuery::Channel);
    }
    let idx = q
        .strip_prefix("pixel:")
        .and_then(|i| i.parse().ok())
        .ok_or_else(|| anyhow!(Usage(format!("query `{q}` must be `pixel:INDEX` or `channel`"))))?;
    Ok(HeatmapQuery::Pixel(idx))
}

fn visualize<T: Real>(cfg: TrainConfig, c: &Container, image: &Path, query: HeatmapQuery, out: &Path) -> Result<()> {
    let tr = Trainer::<T>::from_container(cfg, 1, c)?;
    let img = load_image(image)?;
    evaluation::export_relation_heatmap(&tr.model, &tr.state.teacher.params, &img, query, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate<T: Real>(cfg: TrainConfig, axes: &[Axis], seeds: &[u64], out: &Path) -> Result<()> {
    let (train, val) = load_datasets(&cfg.data).map_err(usage)?;
    let ssl = ssl_images(&cfg, &train);
    let cells = evaluation::ablation_cells(&cfg, axes).map_err(usage)?;
    for (i, (label, c)) in cells.iter().enumerate() {
        fs::write(out.join(format!("cell{i:02}.config.txt")), format!("# {label}\n{}", c.to_text()))?;
    }
    let rows = evaluation::ablation_suite::<T>(&cfg, axes, seeds, &ssl.images, &train, &val, |ci, seed, tr| {
        println!("cell {ci} seed {seed} done");
        tr.save_checkpoint(&out.join(format!("cell{ci:02}_seed{seed}.srlt")))
    })?;
    let table = ablation_table(&rows);
    fs::write(out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

macro_rules! dispatch {
    ($prec:expr, $f:ident($($arg:expr),*)) => {
        match $prec {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { resume, common } => {
            let cfg = resolve_config(&common, TrainConfig::default(), "trainer.seed")?;
            let out = out_dir(&common)?;
            dispatch!(cfg.precision, train(cfg, resume.as_deref(), &out))
        }
        Command::Eval { checkpoint, which, common } => {
            let (c, stored) = read_checkpoint(&checkpoint)?;
            let cfg = resolve_config(&common, stored, "eval.seed")?;
            let out = out_dir(&common)?;
            dispatch!(cfg.precision, eval(cfg, &c, which, &out))
        }
        Command::Visualize {
            checkpoint,
            image,
            query,
            common,
        } => {
            let query = parse_query(&query)?;
            let out = common.out.clone().ok_or_else(|| anyhow!(Usage("--out is required".into())))?;
            let (c, stored) = read_checkpoint(&checkpoint)?;
            let cfg = resolve_config(&common, stored, "eval.seed")?;
            dispatch!(cfg.precision, visualize(cfg, &c, &image, query, &out))
        }
        Command::Ablate { axes, seeds, common } => {
            let cfg = resolve_config(&common, TrainConfig::default(), "trainer.seed")?;
            let axes = axes.iter().map(|a| Axis::parse(a)).collect::<selfrel::Result<Vec<_>>>().map_err(usage)?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| anyhow!(Usage(format!("--seeds `{s}` must be comma-separated integers"))))?,
                None => vec![cfg.seed],
            };
            let out = out_dir(&common)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            dispatch!(cfg.precision, ablate(cfg, &axes, &seeds, &out))
        }
        Command::Keys => {
            print!("{}", TrainConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
