use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use minex_core::config::RunConfig;
use minex_core::dataset::{load_dataset, read_manifest, resolve, write_manifest};
use minex_core::evaluation::{evaluate_dataset, TruthEntry};
use minex_core::image::{read_pgm, write_pgm, write_ppm, GrayImage};
use minex_core::minutia::{read_minutiae, write_minutiae};
use minex_core::model::{load_checkpoint, save_checkpoint};
use minex_core::postprocess::{extract, Thresholds};
use minex_core::reconstruct::{reconstruct, LayerStack, ReconstructionProblem};
use minex_core::render::render_annotated;
use minex_core::synth::{generate_sample, write_sample};
use minex_core::training::{cotrain, RunDir, StageState, TrainHooks};
use minex_core::{Error, Model, NetworkParams};

#[derive(Parser)]
#[command(
    name = "minex",
    version,
    about = "Two-stage minutia extraction for latent fingerprints"
)]
struct Cli {
    /// JSON run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Run the four-step co-training schedule on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Extract minutiae from one image or every image of a dataset.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Score a directory of minutia files against a dataset's ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory holding the manifest.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        dist_tol: Option<f64>,
        #[arg(long)]
        ang_tol: Option<f64>,
        /// Where to write the JSON report (default: <pred>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw ground truth and extractions over a print.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dist_tol: Option<f64>,
        #[arg(long)]
        ang_tol: Option<f64>,
    },
    /// Recover an image from one layer's activations.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: String,
        /// Output PGM; the loss trace goes next to it as CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        history: usize,
    },
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    proposal_threshold: Option<f64>,
    #[arg(long)]
    final_threshold: Option<f64>,
}

/// Bad input: missing files, malformed configs, unknown names. Exit code 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(input_error(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InputError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        Some(
            Error::Config(_)
            | Error::Json { .. }
            | Error::Parse { .. }
            | Error::UnknownLayer { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

struct Ctx {
    config: RunConfig,
    threads: usize,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => {
            require(path, "config file")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if cli.threads == 0 {
        return Err(input_error("--threads must be at least 1"));
    }
    let ctx = Ctx {
        config,
        threads: cli.threads,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Synth { out, n } => cmd_synth(&ctx, &out, n),
        Command::Train { data, out, resume } => cmd_train(&ctx, &data, &out, resume),
        Command::Detect {
            checkpoint,
            image,
            data,
            out,
            thresholds,
        } => cmd_detect(
            &ctx,
            &checkpoint,
            image.as_deref(),
            data.as_deref(),
            &out,
            &thresholds,
        ),
        Command::Eval {
            pred,
            truth,
            dist_tol,
            ang_tol,
            report,
        } => cmd_eval(&ctx, &pred, &truth, dist_tol, ang_tol, report.as_deref()),
        Command::Render {
            image,
            truth,
            pred,
            out,
            dist_tol,
            ang_tol,
        } => cmd_render(
            &ctx,
            &image,
            &truth,
            pred.as_deref(),
            &out,
            dist_tol,
            ang_tol,
        ),
        Command::Reconstruct {
            checkpoint,
            image,
            layer,
            out,
            iters,
            history,
        } => cmd_reconstruct(&ctx, &checkpoint, &image, &layer, &out, iters, history),
    }
}

/// Order-preserving map over `items` on up to `threads` scoped workers.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(anyhow!("worker thread panicked")))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn cmd_synth(ctx: &Ctx, out: &Path, n: usize) -> Result<()> {
    let synth = &ctx.config.synth;
    synth.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let indices: Vec<usize> = (0..n).collect();
    let entries = par_map(&indices, ctx.threads, |&i| {
        let sample = generate_sample(synth, synth.seed, i)?;
        ctx.log(format!("{}: {} minutiae", sample.id, sample.truth.len()));
        Ok(write_sample(out, &sample)?)
    })?;
    write_manifest(out, &entries)?;
    println!("wrote {n} prints to {}", out.display());
    Ok(())
}

/// Run-directory persistence plus progress reporting.
struct Progress {
    inner: RunDir,
    verbose: bool,
}

impl TrainHooks for Progress {
    fn completed_stage(
        &mut self,
        stage: usize,
    ) -> minex_core::Result<Option<(NetworkParams, Vec<minex_core::training::LossRecord>)>> {
        let done = self.inner.completed_stage(stage)?;
        if done.is_some() && self.verbose {
            eprintln!("stage {stage}: reusing finished checkpoint");
        }
        Ok(done)
    }

    fn stage_finished(
        &mut self,
        stage: usize,
        params: &NetworkParams,
        history: &[minex_core::training::LossRecord],
    ) -> minex_core::Result<()> {
        if self.verbose {
            eprintln!("stage {stage}: finished after {} iterations", history.len());
        }
        self.inner.stage_finished(stage, params, history)
    }

    fn resume_point(&mut self, stage: usize) -> minex_core::Result<Option<StageState>> {
        let point = self.inner.resume_point(stage)?;
        if let (Some(p), true) = (&point, self.verbose) {
            eprintln!("stage {stage}: resuming at iteration {}", p.next_iter);
        }
        Ok(point)
    }

    fn iteration_finished(&mut self, stage: usize, state: &StageState) -> minex_core::Result<()> {
        if self.verbose && state.next_iter.is_multiple_of(100) {
            if let Some(r) = state.history.last() {
                eprintln!(
                    "stage {stage} iter {:>5}: loss {:.4} (cls {:.4} loc {:.4} ori {:.4})",
                    state.next_iter, r.loss, r.cls_loss, r.loc_loss, r.ori_loss
                );
            }
        }
        self.inner.iteration_finished(stage, state)
    }
}

fn cmd_train(ctx: &Ctx, data: &Path, out: &Path, resume: bool) -> Result<()> {
    require(
        &data.join(minex_core::dataset::MANIFEST),
        "dataset manifest",
    )?;
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), ctx.config.to_json())?;
    let start = Instant::now();
    let mut hooks = Progress {
        inner: RunDir::new(out, resume)?,
        verbose: ctx.verbose,
    };
    let result = cotrain(
        &dataset,
        &ctx.config.model,
        &ctx.config.train,
        ctx.config.thresholds.proposal,
        &mut hooks,
    )?;
    let checkpoint = out.join("model.ckpt");
    save_checkpoint(&result.model.params, &checkpoint)?;
    let summary = json!({
        "checkpoint": "model.ckpt",
        "images": dataset.len(),
        "wallTimeSeconds": start.elapsed().as_secs_f64(),
        "stages": result.stages,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    for s in &result.stages {
        println!(
            "stage {}: {} iterations, final loss {}",
            s.stage,
            s.iterations,
            s.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"))
        );
    }
    println!("wrote {}", checkpoint.display());
    Ok(())
}

fn load_model(ctx: &Ctx, checkpoint: &Path) -> Result<Model> {
    require(checkpoint, "checkpoint")?;
    let params = load_checkpoint(checkpoint)?;
    Model::new(ctx.config.model.clone(), params)
        .with_context(|| format!("{} does not fit the configured model", checkpoint.display()))
}

fn cmd_detect(
    ctx: &Ctx,
    checkpoint: &Path,
    image: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    args: &ThresholdArgs,
) -> Result<()> {
    let inputs: Vec<(String, PathBuf)> = match (image, data) {
        (Some(img), _) => {
            require(img, "image")?;
            let id = img
                .file_stem()
                .ok_or_else(|| input_error(format!("no file name in {}", img.display())))?
                .to_string_lossy()
                .into_owned();
            vec![(id, img.to_path_buf())]
        }
        (None, Some(dir)) => {
            require(&dir.join(minex_core::dataset::MANIFEST), "dataset manifest")?;
            read_manifest(dir)?
                .into_iter()
                .map(|e| (e.id, resolve(dir, &e.image_path)))
                .collect()
        }
        (None, None) => return Err(input_error("either --image or --data is required")),
    };
    let model = load_model(ctx, checkpoint)?;
    let thresholds = Thresholds {
        proposal: args
            .proposal_threshold
            .unwrap_or(ctx.config.thresholds.proposal),
        final_: args.final_threshold.unwrap_or(ctx.config.thresholds.final_),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let counts = par_map(&inputs, ctx.threads, |(id, path)| {
        let image = read_pgm(path)?.to_tensor();
        let found = extract(&model, &image, thresholds)?;
        write_minutiae(&out.join(format!("{id}.txt")), &found, true)?;
        ctx.log(format!("{id}: {} minutiae", found.len()));
        Ok(found.len())
    })?;
    println!(
        "wrote {} minutia files ({} minutiae) to {}",
        counts.len(),
        counts.iter().sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn tolerance(
    ctx: &Ctx,
    dist: Option<f64>,
    angle: Option<f64>,
) -> Result<minex_core::evaluation::Tolerance> {
    let mut tol = ctx.config.eval;
    if let Some(d) = dist {
        tol.dist = d;
    }
    if let Some(a) = angle {
        tol.angle = a;
    }
    if !(tol.dist > 0.0 && tol.angle > 0.0) {
        return Err(input_error("tolerances must be positive"));
    }
    Ok(tol)
}

fn cmd_eval(
    ctx: &Ctx,
    pred: &Path,
    truth_dir: &Path,
    dist: Option<f64>,
    angle: Option<f64>,
    report_path: Option<&Path>,
) -> Result<()> {
    let tol = tolerance(ctx, dist, angle)?;
    require(pred, "prediction directory")?;
    require(
        &truth_dir.join(minex_core::dataset::MANIFEST),
        "dataset manifest",
    )?;
    let manifest = read_manifest(truth_dir)?;
    let truth: Vec<TruthEntry> = manifest
        .iter()
        .map(|e| {
            Ok(TruthEntry {
                id: e.id.clone(),
                minutiae: read_minutiae(&resolve(truth_dir, &e.minutia_path))?,
                quality: Some(e.quality.clone()),
            })
        })
        .collect::<Result<_>>()?;

    let has_predictions = std::fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x == "txt"));
    let mut predictions = BTreeMap::new();
    if has_predictions {
        let missing: Vec<&str> = manifest
            .iter()
            .filter(|e| !pred.join(format!("{}.txt", e.id)).exists())
            .map(|e| e.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(input_error(format!(
                "no predictions for: {}",
                missing.join(", ")
            )));
        }
        for e in &manifest {
            predictions.insert(
                e.id.clone(),
                read_minutiae(&pred.join(format!("{}.txt", e.id)))?,
            );
        }
    } else {
        // an empty directory scores as extracting nothing at all
        for e in &manifest {
            predictions.insert(e.id.clone(), Vec::new());
        }
    }
    let report = evaluate_dataset(&predictions, &truth, &tol)?;
    let path = report_path.map_or_else(|| pred.join("report.json"), Path::to_path_buf);
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", report.table().trim_end());
    ctx.log(format!("report written to {}", path.display()));
    Ok(())
}

fn cmd_render(
    ctx: &Ctx,
    image: &Path,
    truth: &Path,
    pred: Option<&Path>,
    out: &Path,
    dist: Option<f64>,
    angle: Option<f64>,
) -> Result<()> {
    let tol = tolerance(ctx, dist, angle)?;
    require(image, "image")?;
    require(truth, "truth file")?;
    let gray = read_pgm(image)?;
    let truth = read_minutiae(truth)?;
    let extracted = match pred {
        Some(p) => {
            require(p, "prediction file")?;
            read_minutiae(p)?
        }
        None => Vec::new(),
    };
    write_ppm(out, &render_annotated(&gray, &truth, &extracted, &tol))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_reconstruct(
    ctx: &Ctx,
    checkpoint: &Path,
    image: &Path,
    layer: &str,
    out: &Path,
    iters: usize,
    history: usize,
) -> Result<()> {
    require(image, "image")?;
    let model = load_model(ctx, checkpoint)?;
    let stack = LayerStack::from_model(&model, layer)?;
    let input = read_pgm(image)?.to_tensor();
    let target = stack.forward(&input)?;
    let mut problem = ReconstructionProblem::new(stack, target, input.shape());
    problem.max_iters = iters;
    problem.history_size = history;
    let start = Instant::now();
    let rec = reconstruct(&problem)?;
    write_pgm(out, &GrayImage::from_tensor(&rec.display()))?;
    let csv = out.with_extension("csv");
    std::fs::write(&csv, rec.trace_csv(iters))
        .with_context(|| format!("writing {}", csv.display()))?;
    let reduction = if rec.initial_loss > 0.0 {
        1.0 - rec.loss / rec.initial_loss
    } else {
        1.0
    };
    ctx.log(format!(
        "{iters} iterations in {:.1}s",
        start.elapsed().as_secs_f64()
    ));
    println!(
        "layer {layer}: loss {:.6e} -> {:.6e} ({:.2}% reduction); wrote {} and {}",
        rec.initial_loss,
        rec.loss,
        100.0 * reduction,
        out.display(),
        csv.display()
    );
    Ok(())
}
