use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pah_core::checkpoint::{self, Checkpoint};
use pah_core::data::{generate_synthetic, load_dataset, read_png, Dataset, Split, SynthSpec};
use pah_core::eval::{evaluate, rank_gallery, EvalOptions, EvalReport, ItemMeta, Scenario};
use pah_core::heads::HeadBox;
use pah_core::model::ModelInput;
use pah_core::train::{train, Trainer, TrainSet, CHECKPOINT_FILE};
use pah_core::{Exec, RunConfig};

#[derive(Parser)]
#[command(name = "pah", version, about = "Three-stream clothes-changing person re-identification")]
struct Cli {
    /// Run every data-parallel stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG images plus manifest.csv).
    GenData(GenDataArgs),
    /// Train a model; writes metrics.csv and checkpoint.bin into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics CSV.
    Eval(EvalArgs),
    /// Rank gallery images for one query image.
    Retrieve(RetrieveArgs),
    /// Dump pseudo-label maps of training images as PNGs.
    InspectLabels(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training identities.
    #[arg(long, default_value_t = 8)]
    ids: usize,
    /// Training images per identity.
    #[arg(long, default_value_t = 12)]
    images: usize,
    /// Outfits per identity.
    #[arg(long, default_value_t = 2)]
    clothes: usize,
    /// Identities that only appear in query/gallery.
    #[arg(long, default_value_t = 8)]
    test_ids: usize,
    /// Extra query/gallery images of each training identity.
    #[arg(long, default_value_t = 0)]
    heldout: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split searched as the gallery.
    #[arg(long, default_value = "gallery")]
    gallery_split: Split,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "query")]
    query_split: Split,
    /// One of general, same, cross; all three when omitted.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Metrics CSV path; defaults to eval.csv next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop gallery entries that are the query image itself.
    #[arg(long)]
    exclude_self: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Query PNG.
    #[arg(long)]
    query: PathBuf,
    /// Head box of the query as x0,y0,x1,y1.
    #[arg(long)]
    head_box: Option<String>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of training images to dump.
    #[arg(long, default_value_t = 8)]
    limit: usize,
    /// Pixel upscaling of the written maps.
    #[arg(long, default_value_t = 8)]
    scale: usize,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        num_ids: a.ids,
        imgs_per_id: a.images,
        clothes_per_id: a.clothes,
        height: a.height,
        width: a.width,
        seed: a.seed,
        test_ids: a.test_ids,
        heldout_per_id: a.heldout,
    };
    let m = generate_synthetic(&a.out, &spec)?;
    println!("wrote {} images to {}", m.records.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs, exec: Exec) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("expected KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.model.seed = s;
    }
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    let outcome = train(&cfg, exec)?;
    if let Some(last) = outcome.metrics.last() {
        println!("epoch {} loss {:.4}", last.epoch, last.loss_total);
    }
    if let Some((_, report)) = outcome.reports.last() {
        write_report(report, &cfg.out_dir.join("eval.csv"))?;
        print!("{}", report.table());
    }
    println!("checkpoint {}", cfg.out_dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    report.write_csv(&mut w)?;
    Ok(())
}

fn open(source: &SourceArgs) -> Result<(Checkpoint, Dataset)> {
    let ck = checkpoint::load(&source.checkpoint)
        .with_context(|| format!("loading checkpoint {}", source.checkpoint.display()))?;
    let root = source.dataset.clone().unwrap_or_else(|| ck.config.dataset.clone());
    let ds = load_dataset(&root, true).with_context(|| format!("loading dataset {}", root.display()))?;
    Ok((ck, ds))
}

fn split_inputs(ds: &Dataset, split: Split) -> Result<Vec<(ModelInput, ItemMeta)>> {
    ds.samples(split)?
        .into_iter()
        .map(|s| Ok((s.model_input()?, s.meta())))
        .collect()
}

fn run_eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let (ck, ds) = open(&a.source)?;
    let q = split_inputs(&ds, a.query_split)?;
    let g = split_inputs(&ds, a.source.gallery_split)?;
    if q.is_empty() || g.is_empty() {
        bail!("query split {} or gallery split {} is empty", a.query_split, a.source.gallery_split);
    }
    let scenarios = match a.scenario {
        Some(s) => vec![s],
        None => Scenario::ALL.to_vec(),
    };
    let opts = EvalOptions {
        exclude_same_sample: a.exclude_self,
        ..EvalOptions::default()
    };
    let report = evaluate(&ck.model, &q, &g, &scenarios, opts, exec)?;
    let out = a
        .out
        .unwrap_or_else(|| a.source.checkpoint.with_file_name("eval.csv"));
    write_report(&report, &out)?;
    print!("{}", report.table());
    println!("metrics {}", out.display());
    Ok(())
}

fn parse_box(s: &str) -> Result<HeadBox> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("head box {s:?} must be x0,y0,x1,y1"))?;
    match v[..] {
        [x0, y0, x1, y1] => Ok(HeadBox { x0, y0, x1, y1 }),
        _ => bail!("head box {s:?} must be x0,y0,x1,y1"),
    }
}

fn run_retrieve(a: RetrieveArgs, exec: Exec) -> Result<()> {
    if a.top_k == 0 {
        bail!("--top-k must be at least 1");
    }
    let (ck, ds) = open(&a.source)?;
    let pixels = read_png(&a.query).with_context(|| format!("reading {}", a.query.display()))?;
    let head = a.head_box.as_deref().map(parse_box).transpose()?;
    let query = ck.model.descriptor(&ModelInput::new(pixels, head)?)?;
    let idx = ds.indices(a.source.gallery_split);
    if idx.is_empty() {
        bail!("gallery split {} is empty", a.source.gallery_split);
    }
    let inputs = idx
        .iter()
        .map(|&i| ds.sample(i)?.model_input())
        .collect::<pah_core::Result<Vec<_>>>()?;
    let gallery = ck.model.descriptors(&inputs, exec)?;
    println!("{:>4} {:>10} {:>8} {:>7}  path", "rank", "similarity", "identity", "clothes");
    for (rank, (gi, sim)) in rank_gallery(&query, &gallery)?.into_iter().take(a.top_k).enumerate() {
        let r = &ds.manifest.records[idx[gi]];
        println!(
            "{:>4} {:>10.6} {:>8} {:>7}  {}",
            rank + 1,
            sim,
            r.identity,
            r.clothes_id,
            r.path.display()
        );
    }
    Ok(())
}

fn run_inspect(a: InspectArgs, exec: Exec) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let root = a.dataset.clone().unwrap_or_else(|| ck.config.dataset.clone());
    let ds = load_dataset(&root, true)?;
    let mut set = TrainSet::from_dataset(&ds)?;
    set.samples.truncate(a.limit);
    set.labels.truncate(a.limit);
    let epoch = ck.epoch as usize;
    let trainer = Trainer::from_checkpoint(ck, exec);
    let maps = trainer.pseudo_labels(&set, epoch)?;
    std::fs::create_dir_all(&a.out)?;
    for (s, m) in set.samples.iter().zip(&maps) {
        let path = a.out.join(format!("labels_{:04}.png", s.sample_id));
        m.write_png(&path, a.scale)?;
        println!("{}{}", path.display(), if m.fallback { " (fallback)" } else { "" });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a, exec),
        Command::Eval(a) => run_eval(a, exec),
        Command::Retrieve(a) => run_retrieve(a, exec),
        Command::InspectLabels(a) => run_inspect(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
