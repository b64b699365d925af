//! `dealias`: masks, simulation, training, reconstruction, evaluation,
//! gradient checks and image export.
//!
//! Exit codes: 0 success, 1 I/O, 2 argument or shape error, 3 numeric
//! divergence, 4 gradient-check failure.

mod export;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dealias_core::gradcheck::{run_gradcheck, GradcheckConfig};
use dealias_core::metrics::{write_per_image_csv, write_report_csv, MetricReport, MetricSummary, ReportRow};
use dealias_core::network::io::check_header;
use dealias_core::network::{init_params, load_params, save_params, ModelParameters, NetworkConfig, ParamsHeader};
use dealias_core::numerics::{fft2_centered, rss_combine};
use dealias_core::sampling::{generate, MaskPattern, SamplingMask};
use dealias_core::simdata::{read_dataset, simulate_dataset, write_dataset, SampleRecord, SimConfig};
use dealias_core::training::{
    load_checkpoint, reconstruct, reconstruct_zero_filled, train, Dataset, OptimizerKind, StartFrom, TrainConfig,
};
use dealias_core::Error;

use export::{error_map, normalize_minmax, save_gray, ImageFormat};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    /// Classify a library error, prefixing the file it concerns.
    fn at(path: &Path, err: Error) -> Self {
        let mut f = Self::from(err);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Io(_) | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated(_) | Error::Malformed(_) => {
                EXIT_IO
            }
            Error::NonFinite(_) => EXIT_DIVERGED,
            Error::InvalidShape(_)
            | Error::ShapeMismatch(_)
            | Error::InvalidArgument(_)
            | Error::ParamShape { .. }
            | Error::Calibration { .. } => EXIT_USAGE,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "dealias", version, about = "Unrolled convolutional de-aliasing for parallel MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an undersampling mask and print its statistics.
    Mask(MaskArgs),
    /// Simulate a multi-coil phantom dataset.
    Simulate(SimulateArgs),
    /// Train the network.
    Train(TrainArgs),
    /// Reconstruct a dataset with a trained model or the zero-filled baseline.
    Reconstruct(ReconstructArgs),
    /// Compare reconstructions against the ground truth (NMSE/PSNR/SSIM).
    Evaluate(EvaluateArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Write magnitude images and error maps as PGM or PNG.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// uniform1d, random1d, poisson2d or radial2d
    #[arg(long)]
    pattern: String,
    #[arg(long = "h")]
    height: usize,
    #[arg(long = "w")]
    width: usize,
    /// Target acceleration factor
    #[arg(long = "r")]
    rate: f64,
    /// Fully sampled center lines (columns for 1D patterns, a square block for Poisson)
    #[arg(long, default_value_t = 0)]
    acs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Mask file(s); record i uses mask i mod count
    #[arg(long, required = true, num_args = 1..)]
    mask: Vec<PathBuf>,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Complex k-space noise standard deviation per component
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Coil sensitivity width in pixels [default: 0.375 * min(H, W)]
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct NetworkArgs {
    /// Unrolled stages
    #[arg(long = "n", default_value_t = 13)]
    stages: usize,
    /// Substages per stage
    #[arg(long = "k", default_value_t = 1)]
    substages: usize,
    /// Filters per convolution
    #[arg(long = "L", default_value_t = 9)]
    filters: usize,
    /// Control points per piecewise-linear function
    #[arg(long, default_value_t = 63)]
    knots: usize,
    /// Data-consistency penalty weight
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
    /// Regularizer step size
    #[arg(long = "alpha-r", default_value_t = 0.3)]
    alpha_r: f64,
    /// Multiplier update step
    #[arg(long, default_value_t = 1.8)]
    eta: f64,
    /// Initial scale of the second convolution
    #[arg(long = "lambda-init", default_value_t = 0.01)]
    lambda_init: f64,
}

impl NetworkArgs {
    fn config(&self) -> NetworkConfig {
        NetworkConfig {
            stages: self.stages,
            substages: self.substages,
            filters: self.filters,
            knots: self.knots,
            rho: self.rho,
            alpha_r: self.alpha_r,
            eta: self.eta,
            lambda_init: self.lambda_init,
            ..NetworkConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset (PMRD)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset (PMRD)
    #[arg(long)]
    val: Option<PathBuf>,
    /// Mask file(s) indexed by the records' mask ids
    #[arg(long, num_args = 1..)]
    mask: Vec<PathBuf>,
    #[command(flatten)]
    net: NetworkArgs,
    /// Epochs
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// sgd or adam
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    /// Heavy-ball momentum for sgd
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long = "shuffle-seed", default_value_t = 0)]
    shuffle_seed: u64,
    #[arg(long = "checkpoint-every", default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long = "checkpoint-dir")]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in this directory
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from these parameters instead of the default initialization
    #[arg(long = "init")]
    init: Option<PathBuf>,
    /// Write the initial parameters to this file and exit
    #[arg(long = "dump-init")]
    dump_init: Option<PathBuf>,
    /// Final model (PMNW)
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Training log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    mask: Vec<PathBuf>,
    /// Skip the network and write the zero-filled reconstruction
    #[arg(long = "zero-filled")]
    zero_filled: bool,
    /// Expected stage count of the model
    #[arg(long = "n")]
    stages: Option<usize>,
    /// Expected filter count of the model
    #[arg(long = "L")]
    filters: Option<usize>,
    /// Also write RSS magnitude images (PGM) into this directory
    #[arg(long = "rss-dir")]
    rss_dir: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Reconstructions (PMRD written by `reconstruct`)
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth dataset (PMRD)
    #[arg(long)]
    reference: PathBuf,
    /// Mask label for the report row
    #[arg(long = "mask-name", default_value = "unknown")]
    mask_name: String,
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, default_value = "network")]
    method: String,
    /// Aggregate report (CSV); printed to stdout if omitted
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Per-image metrics (CSV)
    #[arg(long = "per-image")]
    per_image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Central-difference step
    #[arg(long, default_value_t = dealias_core::gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Break the recon-layer adjoint (negative control)
    #[arg(long = "perturb-backward")]
    perturb_backward: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Record index to export (all records if omitted)
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
    format: ImageFormat,
    /// Error-map amplification factor
    #[arg(long, default_value_t = 5.0)]
    amplify: f64,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

fn load_masks(paths: &[PathBuf]) -> CliResult<Vec<SamplingMask>> {
    paths
        .iter()
        .map(|p| SamplingMask::load(p).map_err(|e| Failure::at(p, e)))
        .collect()
}

fn load_records(path: &Path) -> CliResult<Vec<SampleRecord>> {
    read_dataset(path).map_err(|e| Failure::at(path, e))
}

fn load_dataset(path: &Path, masks: &[SamplingMask]) -> CliResult<Dataset> {
    Ok(Dataset::new(load_records(path)?, masks.to_vec())?)
}

fn cmd_mask(a: MaskArgs) -> CliResult {
    let pattern: MaskPattern = a.pattern.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let mask = generate(pattern, a.height, a.width, a.rate, a.acs, a.seed)?;
    mask.save(&a.output).map_err(|e| Failure::at(&a.output, e))?;
    println!("{}", mask.stats());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    if a.count == 0 {
        return Err(Failure::usage("--count must be >= 1"));
    }
    let masks = load_masks(&a.mask)?;
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut cfg = SimConfig::new(a.coils, h, w);
    cfg.seed = a.seed;
    cfg.noise_std = a.noise;
    if let Some(s) = a.sigma {
        cfg.sigma = s;
    }
    let records = simulate_dataset(&cfg, &masks, a.count)?;
    write_dataset(&records, &a.output).map_err(|e| Failure::at(&a.output, e))?;
    println!("wrote {} records of shape ({}, {}, {}) to {}", records.len(), a.coils, h, w, a.output.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let net = a.net.config();
    net.validate()?;
    let optimizer: OptimizerKind = a.optimizer.parse()?;
    if let Some(path) = &a.dump_init {
        let params = init_params(&net)?;
        save_params(&params, path).map_err(|e| Failure::at(path, e))?;
        println!("wrote initial parameters to {}", path.display());
        return Ok(());
    }
    let train_path = a.train.as_ref().ok_or_else(|| Failure::usage("--train is required"))?;
    let output = a.output.as_ref().ok_or_else(|| Failure::usage("--output is required"))?;
    if a.mask.is_empty() {
        return Err(Failure::usage("--mask is required"));
    }
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        shuffle_seed: a.shuffle_seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: a.checkpoint_dir.clone(),
        momentum: a.momentum,
        optimizer,
        ..TrainConfig::default()
    };
    config.validate()?;

    let masks = load_masks(&a.mask)?;
    let train_set = load_dataset(train_path, &masks)?;
    let val_set = a.val.as_ref().map(|p| load_dataset(p, &masks)).transpose()?;

    let start = if let Some(dir) = &a.resume {
        let cp = load_checkpoint(dir).map_err(|e| Failure::at(dir, e))?;
        check_header(ParamsHeader::of(&cp.params), &net)?;
        StartFrom::Resume(cp)
    } else if let Some(path) = &a.init {
        let p = load_params(path).map_err(|e| Failure::at(path, e))?;
        check_header(ParamsHeader::of(&p), &net)?;
        StartFrom::Init(p)
    } else {
        StartFrom::Init(init_params(&net)?)
    };

    let result = train(&train_set, val_set.as_ref(), &config, start, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.6e}  val NMSE {:.4}  PSNR {:.2} dB  SSIM {:.4}  ({:.1} s)",
            r.epoch, r.train_loss, r.val_nmse, r.val_psnr, r.val_ssim, r.seconds
        );
    });
    let (params, log) = match result {
        Ok(v) => v,
        Err(Error::NonFinite(what)) => {
            let kept = match &config.checkpoint_dir {
                Some(d) => format!("; last checkpoint kept in {}", d.display()),
                None => String::new(),
            };
            return Err(Failure {
                code: EXIT_DIVERGED,
                message: format!("training diverged: non-finite {what}{kept}"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    save_params(&params, output).map_err(|e| Failure::at(output, e))?;
    if let Some(path) = &a.log {
        log.save(path).map_err(|e| Failure::at(path, e))?;
    }
    Ok(())
}

fn check_expected(params: &ModelParameters, stages: Option<usize>, filters: Option<usize>) -> CliResult {
    let h = ParamsHeader::of(params);
    for (field, want, got) in [("n", stages, h.stages), ("L", filters, h.filters)] {
        if let Some(want) = want {
            if want != got {
                return Err(Error::ParamShape {
                    field,
                    expected: want,
                    found: got,
                }
                .into());
            }
        }
    }
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> CliResult {
    let masks = load_masks(&a.mask)?;
    let data = load_dataset(&a.data, &masks)?;
    let params = match (&a.model, a.zero_filled) {
        (_, true) => None,
        (Some(path), false) => {
            let p = load_params(path).map_err(|e| Failure::at(path, e))?;
            check_expected(&p, a.stages, a.filters)?;
            Some(p)
        }
        (None, false) => return Err(Failure::usage("--model is required unless --zero-filled is given")),
    };
    if let Some(dir) = &a.rss_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::at(dir, e.into()))?;
    }
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = match &params {
            Some(p) => reconstruct(p, &data, i)?,
            None => reconstruct_zero_filled(&data, i)?,
        };
        if let Some(dir) = &a.rss_dir {
            let rss = rss_combine(&x);
            let path = dir.join(format!("rss_{i:04}.pgm"));
            save_gray(&path, ImageFormat::Pgm, rss.width, rss.height, &normalize_minmax(&rss))
                .map_err(|m| Failure { code: EXIT_IO, message: m })?;
        }
        let rec = &data.records[i];
        out.push(SampleRecord {
            full_kspace: fft2_centered(&x),
            coil_images: x,
            mask_id: rec.mask_id,
            undersampled_kspace: rec.undersampled_kspace.clone(),
        });
    }
    write_dataset(&out, &a.output).map_err(|e| Failure::at(&a.output, e))?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let recon = load_records(&a.recon)?;
    let reference = load_records(&a.reference)?;
    if recon.len() != reference.len() {
        return Err(Failure::usage(format!(
            "{} reconstructions vs {} reference records",
            recon.len(),
            reference.len()
        )));
    }
    let reports = recon
        .iter()
        .zip(&reference)
        .map(|(r, t)| dealias_core::metrics::evaluate_pair(&r.coil_images, &t.coil_images))
        .collect::<Result<Vec<MetricReport>, _>>()?;
    let row = ReportRow {
        mask: a.mask_name,
        rate: a.rate,
        method: a.method,
        summary: MetricSummary::of(&reports),
    };
    match &a.output {
        Some(path) => {
            let f = std::fs::File::create(path).map_err(|e| Failure::at(path, e.into()))?;
            write_report_csv(std::io::BufWriter::new(f), std::slice::from_ref(&row)).map_err(|e| Failure::at(path, e))?;
            println!("{}", row.summary);
        }
        None => write_report_csv(std::io::stdout().lock(), std::slice::from_ref(&row))?,
    }
    if let Some(path) = &a.per_image {
        let f = std::fs::File::create(path).map_err(|e| Failure::at(path, e.into()))?;
        write_per_image_csv(std::io::BufWriter::new(f), &reports).map_err(|e| Failure::at(path, e))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(Failure::usage("--step must be > 0"));
    }
    let report = run_gradcheck(&GradcheckConfig {
        step: a.step,
        seed: a.seed,
        perturb_backward: a.perturb_backward,
        ..GradcheckConfig::default()
    })?;
    println!("{report}");
    if report.passed() {
        return Ok(());
    }
    let offender = report
        .classes
        .iter()
        .find_map(|c| c.failing.as_ref())
        .map(|(r, _, _)| format!("{} (stage {}, substage {}, index {})", r.class, r.stage, r.substage, r.index))
        .unwrap_or_default();
    Err(Failure {
        code: EXIT_GRADCHECK,
        message: format!("gradient check failed at {offender}"),
    })
}

fn cmd_export(a: ExportArgs) -> CliResult {
    if !(a.amplify > 0.0 && a.amplify.is_finite()) {
        return Err(Failure::usage("--amplify must be > 0"));
    }
    let recon = load_records(&a.recon)?;
    let reference = a.reference.as_deref().map(load_records).transpose()?;
    if let Some(r) = &reference {
        if r.len() != recon.len() {
            return Err(Failure::usage(format!("{} reconstructions vs {} references", recon.len(), r.len())));
        }
    }
    let indices: Vec<usize> = match a.index {
        Some(i) if i >= recon.len() => {
            return Err(Failure::usage(format!("index {i} out of range for {} records", recon.len())))
        }
        Some(i) => vec![i],
        None => (0..recon.len()).collect(),
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::at(&a.out_dir, e.into()))?;
    let ext = a.format.extension();
    let io = |m: String| Failure { code: EXIT_IO, message: m };
    for i in indices {
        let est = rss_combine(&recon[i].coil_images);
        let (w, h) = (est.width, est.height);
        save_gray(&a.out_dir.join(format!("recon_{i:04}.{ext}")), a.format, w, h, &normalize_minmax(&est)).map_err(io)?;
        if let Some(refs) = &reference {
            let truth = rss_combine(&refs[i].coil_images);
            if truth.height != h || truth.width != w {
                return Err(Failure::usage(format!("record {i}: reconstruction and reference differ in size")));
            }
            save_gray(&a.out_dir.join(format!("reference_{i:04}.{ext}")), a.format, w, h, &normalize_minmax(&truth))
                .map_err(io)?;
            let err = error_map(&est, &truth, truth.max(), a.amplify);
            save_gray(&a.out_dir.join(format!("error_{i:04}.{ext}")), a.format, w, h, &err).map_err(io)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
