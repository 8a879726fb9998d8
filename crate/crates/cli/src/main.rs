use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dafe::checkpoint::Checkpoint;
use dafe::config::Config;
use dafe::eval::{write_cmc_csv, write_report_csv};
use dafe::io::read_image;
use dafe::optim::{run_benchmark, write_trace_csv};
use dafe::synth::{generate_synthetic, read_dataset, write_dataset, Dataset};
use dafe::train::TRAIN_CSV_HEADER;
use dafe::workflow;
use dafe::Error;

#[derive(Parser)]
#[command(name = "dafe", version, about = "Re-identification features: CRBM stacks, a learned similarity head and quadruplet training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and DAFE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as root/<identity>/<view>/<n>.pgm.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// CD-pretrain the stack on the training identities.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset root; the synthetic set from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune head and top layers from a pretrained or partly trained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write out/checkpoint.dafe every N iterations (0: only at the end).
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
    },
    /// Single-shot CMC and mAP on the test identities.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        mq: bool,
    },
    /// Optimizer suboptimality trace on the ridge benchmark.
    BenchOptim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Embed images; writes features.csv.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files; a dataset root via --data otherwise.
        images: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Similarity of a probe image to each gallery image; writes scores.csv.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(required = true)]
        gallery: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Contract(_) => 1,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Dimension(_) => 2,
    }
}

/// Config file (or `base`), then DAFE_SEED, then --set, then --seed.
fn load_config(common: &Common, base: Option<&Config>) -> dafe::Result<Config> {
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => Config::toy(),
    };
    cfg.apply_env_seed()?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &Config, data: &Option<PathBuf>) -> dafe::Result<Dataset> {
    match data {
        Some(root) => read_dataset(root),
        None => generate_synthetic(&cfg.data),
    }
}

fn out_dir(common: &Common) -> dafe::Result<&Path> {
    std::fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn run(cli: Cli) -> dafe::Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common, None)?;
            let data = generate_synthetic(&cfg.data)?;
            write_dataset(out_dir(&common)?, &data)?;
            log::info!("wrote {} images to {}", data.len(), common.out.display());
        }
        Command::Pretrain { common, data } => {
            let cfg = load_config(&common, None)?;
            let ds = dataset(&cfg, &data)?;
            let (train_ids, _) = workflow::split(&cfg, &ds)?;
            let out = out_dir(&common)?;
            let mut csv = BufWriter::new(File::create(out.join("pretrain.csv"))?);
            writeln!(csv, "branch,layer,epoch,mse")?;
            let mut io_err = None;
            let ckpt = workflow::pretrain(&cfg, &ds, &train_ids, &mut |b, r| {
                log::info!("branch {b} layer {} epoch {} mse {:.6}", r.layer, r.epoch, r.mse);
                if let Err(e) = writeln!(csv, "{b},{},{},{}", r.layer, r.epoch, r.mse) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            csv.flush()?;
            ckpt.save(&out.join("pretrained.dafe"))?;
        }
        Command::Train {
            common,
            checkpoint,
            data,
            checkpoint_every,
        } => {
            let start = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(&common, Some(&start.config))?;
            let ds = dataset(&cfg, &data)?;
            let (train_ids, _) = workflow::split(&cfg, &ds)?;
            let out = out_dir(&common)?.to_path_buf();
            let csv_path = out.join("train.csv");
            let resume_at = start.train.as_ref().map_or(0, |t| t.iteration);
            let csv = std::cell::RefCell::new(open_train_csv(&csv_path, resume_at)?);
            let done = workflow::fine_tune(
                &cfg,
                &ds,
                &train_ids,
                &start,
                checkpoint_every,
                &mut |r| {
                    if (r.iteration + 1) % 100 == 0 {
                        log::info!("iteration {} loss {:.4}", r.iteration + 1, r.loss);
                    }
                    writeln!(csv.borrow_mut(), "{}", r.csv())?;
                    Ok(())
                },
                &mut |c| {
                    csv.borrow_mut().flush()?;
                    c.save(&out.join("checkpoint.dafe"))
                },
            )?;
            csv.into_inner().flush()?;
            done.save(&out.join("model.dafe"))?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            trials,
            mq,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = load_config(&common, Some(&ckpt.config))?;
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            cfg.eval.mq |= mq;
            cfg.validate()?;
            let ds = dataset(&cfg, &data)?;
            let (_, test_ids) = workflow::split(&cfg, &ds)?;
            let report = workflow::evaluate(&cfg, &ckpt, &ds, &test_ids)?;
            let out = out_dir(&common)?;
            write_cmc_csv(&out.join("cmc.csv"), &report)?;
            write_report_csv(&out.join("report.csv"), &report)?;
            println!("rank-1 {:.4}  mAP {:.4}  trials {}", report.rank(1), report.map, report.trials);
        }
        Command::BenchOptim {
            common,
            variant,
            q,
            k,
            mu,
            epochs,
        } => {
            let mut cfg = load_config(&common, None)?;
            let b = &mut cfg.bench;
            b.variant = variant.unwrap_or(b.variant.clone());
            b.q = q.unwrap_or(b.q);
            b.k = k.unwrap_or(b.k);
            b.mu = mu.unwrap_or(b.mu);
            b.epochs = epochs.unwrap_or(b.epochs);
            cfg.validate()?;
            let trace = run_benchmark(&cfg.bench)?;
            write_trace_csv(&out_dir(&common)?.join("trace.csv"), &trace)?;
            if let Some(last) = trace.last() {
                println!("{} final suboptimality {:.3e} after {} evaluations", cfg.bench.variant, last.suboptimality, last.evaluations);
            }
        }
        Command::Extract {
            common,
            checkpoint,
            images,
            data,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(&common, Some(&ckpt.config))?;
            let mut csv = BufWriter::new(File::create(out_dir(&common)?.join("features.csv"))?);
            if images.is_empty() {
                let ds = dataset(&cfg, &data)?;
                writeln!(csv, "identity,view,features")?;
                for (img, l) in ds.images.iter().zip(&ds.labels) {
                    let f = ckpt.embedder.embed(img)?;
                    writeln!(csv, "{},{},{}", l.identity, l.view, join(&f, " "))?;
                }
            } else {
                writeln!(csv, "image,features")?;
                for p in &images {
                    let f = ckpt.embedder.embed(&read_image(p)?)?;
                    writeln!(csv, "{},{}", p.display(), join(&f, " "))?;
                }
            }
            csv.flush()?;
        }
        Command::Score {
            common,
            checkpoint,
            probe,
            gallery,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(&common, Some(&ckpt.config))?;
            let scorer = workflow::scorer(&cfg, &ckpt)?;
            let p = ckpt.embedder.embed(&read_image(&probe)?)?;
            let mut csv = BufWriter::new(File::create(out_dir(&common)?.join("scores.csv"))?);
            writeln!(csv, "gallery,score")?;
            for g in &gallery {
                let s = scorer.score(&p, &ckpt.embedder.embed(&read_image(g)?)?)?;
                println!("{}\t{s}", g.display());
                writeln!(csv, "{},{s}", g.display())?;
            }
            csv.flush()?;
        }
    }
    Ok(())
}

/// The training log, keeping rows before `resume_at` from an earlier run so a
/// resumed run ends with the same file as an uninterrupted one.
fn open_train_csv(path: &Path, resume_at: usize) -> dafe::Result<BufWriter<File>> {
    let mut kept = vec![TRAIN_CSV_HEADER.to_string()];
    if resume_at > 0 {
        let old = std::fs::read_to_string(path).unwrap_or_default();
        kept.extend(
            old.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < resume_at))
                .map(str::to_string),
        );
    }
    let mut w = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    Ok(w)
}

fn join(v: &[f64], sep: &str) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(sep)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
