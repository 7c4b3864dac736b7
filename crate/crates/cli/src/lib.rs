//! Command-line front end for the segmentation pipeline.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use cystseg::dataio::{
    self, gen_phantom, phantom_series, read_manifest, read_mask_pgm, read_pgm, write_mask_pgm, write_pgm, BinaryMask,
    GrayImage, Manifest, ManifestRecord,
};
use cystseg::metrics::{aggregate_stats, grader_iov, intersect_masks, EvalReport};
use cystseg::preprocess;
use cystseg::retinagraph::LayerPath;
use cystseg::samplekit::{self, load_sample, prepare_scan, save_sample, ReferenceDims, Sample};
use cystseg::trainer::{self, load_checkpoint, save_checkpoint, Predictor, TrainSample};

pub use config::{parse_config, Config, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "cystseg", version, about = "Intra-retinal cyst segmentation pipeline")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tab-separated manifest of input files.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scans with cyst masks.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 96)]
        cols: usize,
        /// Also write a second, dilated mask as a simulated second grader.
        #[arg(long)]
        second_grader: bool,
    },
    /// Edge-preserving denoising.
    Denoise {
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// ILM/ISM extraction with overlay and ROI images.
    Layers {
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Build padded two-channel network inputs.
    Prepare,
    /// Train a network from a manifest of samples and masks.
    Train,
    /// Segment the scans of a manifest with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score predicted masks against reference masks.
    Evaluate,
    /// Agreement between two graders' masks.
    Iov,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    dataio::DataError,
    samplekit::SampleError,
    trainer::TrainError,
    cystseg::metrics::MetricsError,
    cystseg::retinagraph::GraphError,
    preprocess::FilterError
);

type Result<T> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 success, 2 usage or config error,
/// 1 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    manifest: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self) -> Result<Manifest> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| CliError::Usage("this subcommand needs --manifest".into()))?;
        Ok(read_manifest(path)?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        Ok(dataio::write_atomic(&self.path(name), text.as_bytes())?)
    }

    /// Explicit inputs, or the image column of the manifest.
    fn images(&self, inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
        if !inputs.is_empty() {
            return Ok(inputs.to_vec());
        }
        if self.manifest.is_none() {
            return Err(CliError::Usage("give --input files or --manifest".into()));
        }
        Ok(self.manifest()?.records.into_iter().map(|r| r.image).collect())
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli
        .out
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let ctx = Ctx {
        cfg,
        out,
        manifest: cli.manifest,
    };
    match cli.command {
        Command::Phantom {
            count,
            rows,
            cols,
            second_grader,
        } => cmd_phantom(&ctx, count, rows, cols, second_grader),
        Command::Denoise { input } => cmd_denoise(&ctx, &input),
        Command::Layers { input } => cmd_layers(&ctx, &input),
        Command::Prepare => cmd_prepare(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Predict { checkpoint } => cmd_predict(&ctx, &checkpoint),
        Command::Evaluate => cmd_evaluate(&ctx),
        Command::Iov => cmd_iov(&ctx),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// One-pixel 4-neighbour dilation.
fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (rows, cols) = (mask.rows(), mask.cols());
    BinaryMask::from_fn(rows, cols, |r, c| {
        mask.get(r, c)
            || (r > 0 && mask.get(r - 1, c))
            || (r + 1 < rows && mask.get(r + 1, c))
            || (c > 0 && mask.get(r, c - 1))
            || (c + 1 < cols && mask.get(r, c + 1))
    })
    .expect("same dims")
}

fn cmd_phantom(ctx: &Ctx, count: usize, rows: usize, cols: usize, second: bool) -> Result<()> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let mut manifest = String::new();
    for (i, spec) in phantom_series(count, rows, cols, ctx.cfg.seed).iter().enumerate() {
        let ph = gen_phantom(spec)?;
        let name = format!("phantom_{i:04}");
        write_pgm(&ph.image, &ctx.path(&format!("{name}.pgm")))?;
        write_mask_pgm(&ph.mask, &ctx.path(&format!("{name}_mask.pgm")))?;
        let _ = write!(manifest, "{name}.pgm\t{name}_mask.pgm");
        if second {
            write_mask_pgm(&dilate(&ph.mask), &ctx.path(&format!("{name}_mask2.pgm")))?;
            let _ = write!(manifest, "\t{name}_mask2.pgm");
        }
        manifest.push('\n');
    }
    ctx.write_text("manifest.tsv", &manifest)
}

fn cmd_denoise(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    for path in ctx.images(inputs)? {
        let img = read_pgm(&path)?;
        let out = preprocess::denoise(&img, ctx.cfg.sigma_d)?;
        write_pgm(&out, &ctx.path(&format!("{}_denoised.pgm", stem(&path))))?;
    }
    Ok(())
}

/// Marks a boundary with alternating 255/0 pixels so it shows on any
/// background.
fn draw_path(img: &mut GrayImage, path: &LayerPath) {
    for c in 0..img.cols() {
        img.set(path.row_at(c), c, if c % 2 == 0 { 255 } else { 0 });
    }
}

fn cmd_layers(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    for path in ctx.images(inputs)? {
        let img = read_pgm(&path)?;
        let name = stem(&path);
        let reference = ReferenceDims::new(img.rows(), img.cols());
        let scan = prepare_scan(&img, reference, &ctx.cfg.prepare())?;
        let mut overlay = scan.denoised.clone();
        draw_path(&mut overlay, &scan.layers.ilm);
        draw_path(&mut overlay, &scan.layers.ism);
        write_pgm(&overlay, &ctx.path(&format!("{name}_overlay.pgm")))?;
        write_mask_pgm(&scan.roi.mask, &ctx.path(&format!("{name}_roi.pgm")))?;
        let mut tsv = String::from("col\tilm\tism\n");
        for c in 0..img.cols() {
            let _ = writeln!(tsv, "{c}\t{}\t{}", scan.layers.ilm.row_at(c), scan.layers.ism.row_at(c));
        }
        ctx.write_text(&format!("{name}_layers.tsv"), &tsv)?;
    }
    Ok(())
}

fn copy_mask(ctx: &Ctx, from: &Path, name: &str) -> Result<BinaryMask> {
    let mask = read_mask_pgm(from)?;
    write_mask_pgm(&mask, &ctx.path(name))?;
    Ok(mask)
}

fn cmd_prepare(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let reference = ctx.cfg.reference();
    let mut out = String::new();
    for rec in &manifest.records {
        let name = rec.name();
        let sample = prepare_scan(&read_pgm(&rec.image)?, reference, &ctx.cfg.prepare())?.sample;
        save_sample(&sample, &ctx.path(&format!("{name}.octf")))?;
        copy_mask(ctx, &rec.mask, &format!("{name}_mask.pgm"))?;
        let _ = write!(out, "{name}.octf\t{name}_mask.pgm");
        if let Some(m2) = &rec.second_mask {
            copy_mask(ctx, m2, &format!("{name}_mask2.pgm"))?;
            let _ = write!(out, "\t{name}_mask2.pgm");
        }
        out.push('\n');
    }
    ctx.write_text("manifest.tsv", &out)
}

/// A prepared `.octf` sample is loaded as is; anything else is read as a
/// PGM scan and prepared into `reference`.
fn load_input(ctx: &Ctx, rec: &ManifestRecord, reference: ReferenceDims) -> Result<Sample> {
    if rec.image.extension().is_some_and(|e| e == "octf") {
        Ok(load_sample(&rec.image)?)
    } else {
        Ok(prepare_scan(&read_pgm(&rec.image)?, reference, &ctx.cfg.prepare())?.sample)
    }
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let mut data = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let sample = load_input(ctx, rec, ctx.cfg.reference())?;
        data.push(TrainSample::new(&sample, &read_mask_pgm(&rec.mask)?)?);
    }
    let mut log = String::new();
    let outcome = trainer::train(&data, &ctx.cfg.unet(), &ctx.cfg.train(), |r| {
        let line = r.log_line();
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    save_checkpoint(&outcome.checkpoint, &ctx.path("checkpoint.unck"))?;
    ctx.write_text("train_log.txt", &log)
}

fn cmd_predict(ctx: &Ctx, checkpoint: &Path) -> Result<()> {
    let manifest = ctx.manifest()?;
    let cp = load_checkpoint(checkpoint)?;
    let predictor = Predictor::new(&cp)?;
    let opts = ctx.cfg.predict();
    let mut out = String::new();
    for rec in &manifest.records {
        let name = rec.name();
        let sample = load_input(ctx, rec, cp.reference)?;
        let pred = predictor.predict(&sample, &opts)?;
        dataio::write_float_raster(&pred.prob, &ctx.path(&format!("{name}_prob.octf")))?;
        write_mask_pgm(&pred.mask, &ctx.path(&format!("{name}_pred.pgm")))?;
        copy_mask(ctx, &rec.mask, &format!("{name}_gt.pgm"))?;
        let _ = write!(out, "{name}_pred.pgm\t{name}_gt.pgm");
        if let Some(m2) = &rec.second_mask {
            copy_mask(ctx, m2, &format!("{name}_gt2.pgm"))?;
            let _ = write!(out, "\t{name}_gt2.pgm");
        }
        out.push('\n');
    }
    ctx.write_text("predictions.tsv", &out)
}

fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let mut preds = Vec::new();
    let mut gt1 = Vec::new();
    let mut gt2 = Vec::new();
    for rec in &manifest.records {
        preds.push((rec.name(), read_mask_pgm(&rec.image)?));
        gt1.push(read_mask_pgm(&rec.mask)?);
        if let Some(p) = &rec.second_mask {
            gt2.push(read_mask_pgm(p)?);
        }
    }
    let report = |refs: &[BinaryMask]| {
        EvalReport::evaluate(preds.iter().zip(refs).map(|((n, p), g)| (n.as_str(), p, g)))
    };
    let mut sections = vec![("gt1", report(&gt1)?)];
    if !gt2.is_empty() {
        if gt2.len() != gt1.len() {
            return Err(CliError::Runtime("second masks must be given for every record or none".into()));
        }
        let both = gt1
            .iter()
            .zip(&gt2)
            .map(|(a, b)| intersect_masks(&[a.clone(), b.clone()]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        sections.push(("gt2", report(&gt2)?));
        sections.push(("gt1_and_gt2", report(&both)?));
    }
    let (text, tsv) = if sections.len() == 1 {
        (sections[0].1.to_text(), sections[0].1.to_tsv())
    } else {
        let mut text = String::new();
        let mut tsv = String::new();
        for (label, r) in &sections {
            let _ = writeln!(text, "reference={label}");
            text.push_str(&r.to_text());
            for line in r.to_tsv().lines() {
                let _ = writeln!(tsv, "{label}\t{line}");
            }
        }
        (text, tsv)
    };
    print!("{text}");
    ctx.write_text("report.txt", &text)?;
    ctx.write_text("report.tsv", &tsv)
}

fn cmd_iov(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let mut text = String::new();
    let mut values = Vec::new();
    for rec in &manifest.records {
        let second = rec
            .second_mask
            .as_ref()
            .ok_or_else(|| CliError::Runtime(format!("record {} has no second mask", rec.name())))?;
        let v = grader_iov(&read_mask_pgm(&rec.mask)?, &read_mask_pgm(second)?)?;
        let _ = writeln!(text, "image={} iov={v:.6}", rec.name());
        values.push(v);
    }
    let (mean, std) = aggregate_stats(&values)?;
    let _ = writeln!(text, "mean iov={mean:.6} std={std:.6}");
    print!("{text}");
    ctx.write_text("iov.txt", &text)
}
