//! Command-line front end: thin wrappers over the library pipelines.
//!
//! Exit codes: 0 success, 1 usage error, 2 input/parse error, 3 numerical
//! failure. Machine-readable results are printed as `#METRIC key=value`
//! lines next to the human-readable summary.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tomofuse::error::TomoError;
use tomofuse::fbp::{fbp_reconstruct, FilterParams};
use tomofuse::fusion::{self, FusionConfig, TrainingPair};
use tomofuse::image::Image;
use tomofuse::io;
use tomofuse::lbfgs::StopReason;
use tomofuse::metrics::{self, HuWindow, SsimParams};
use tomofuse::nn::{self, TrainConfig, Trainer};
use tomofuse::pwc::{self, PwcConfig};
use tomofuse::pwls::{pwls_reconstruct, PwlsParams};
use tomofuse::scan::{self, Phantom, ScanGeometry};

#[derive(Parser)]
#[command(name = "tomofuse", version, about = "CT simulation, reconstruction and learned fusion")]
struct Cli {
    /// Worker threads (default: TOMOFUSE_THREADS or the core count).
    /// Results are bitwise identical for any value; 1 forces serial runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a phantom preset or description file to a TFR1 image
    Phantom(PhantomArgs),
    /// Simulate a parallel-beam scan of an image, writing photon counts
    Scan(ScanArgs),
    /// Filtered back-projection reconstruction from photon counts
    Fbp(FbpArgs),
    /// Penalized weighted least-squares reconstruction with snapshots
    Pwls(PwlsArgs),
    /// Build a fusion training set from image stacks and references
    MakeDataset(MakeDatasetArgs),
    /// Train the fusion network on a dataset
    Train(TrainArgs),
    /// Fuse a stack of image versions with a trained model
    Fuse(FuseArgs),
    /// Quality metrics between a reference and an estimate
    Eval(EvalArgs),
    /// The 1-D piecewise-constant denoising experiment
    PwcDemo(PwcDemoArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Preset name: shepp-logan | random-tissue
    #[arg(long, conflicts_with = "file")]
    preset: Option<String>,
    /// Plain-text ellipse description instead of a preset
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
    /// Seed for the random-tissue preset
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 360)]
    views: usize,
    /// Detector bins (default: enough to cover the image diagonal)
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    bin_spacing: f64,
    /// Blank scan count
    #[arg(long, default_value_t = 2e5)]
    blank: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noiseless: bool,
    /// Treat the input as attenuation values (skip the HU conversion)
    #[arg(long)]
    attenuation: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FbpArgs {
    /// Photon-count file from `scan`
    #[arg(long)]
    input: PathBuf,
    /// Low-pass cut-off in normalized frequency, or `inf`
    #[arg(long)]
    cutoff: String,
    #[arg(long, default_value_t = 3)]
    order: u32,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
    /// Emit attenuation values instead of the Hounsfield-like scale
    #[arg(long)]
    mu: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PwlsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8e-5)]
    beta: f64,
    #[arg(long, default_value_t = 0.02)]
    delta: f64,
    #[arg(long, default_value_t = 90)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    snapshot_every: usize,
    #[arg(long, default_value_t = 10)]
    memory: usize,
    /// Cut-off of the FBP image used as the starting point
    #[arg(long, default_value_t = 2.0)]
    init_cutoff: f64,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
    /// Emit attenuation values instead of the Hounsfield-like scale
    #[arg(long)]
    mu: bool,
    /// Output prefix; snapshots land in `<prefix>_it<k>.tfr`
    #[arg(short, long)]
    output: String,
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Comma-separated stack of version images; repeat per training pair
    #[arg(long, required = true)]
    stack: Vec<String>,
    /// Reference image per training pair, matched by position
    #[arg(long = "ref", required = true)]
    reference: Vec<PathBuf>,
    /// Comma-separated neighborhood radius per stack image
    #[arg(long, default_value = "3,3,3")]
    radii: String,
    #[arg(long, default_value_t = 3)]
    out_radius: usize,
    #[arg(long, default_value_t = 3)]
    stride: usize,
    #[arg(long, default_value_t = 30000)]
    max_examples: usize,
    #[arg(long, default_value_t = 1e-6)]
    var_prune: f64,
    #[arg(long, default_value_t = 0.02)]
    grad_prune: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Hidden layer sizes, e.g. `40` or `40,20`
    #[arg(long, default_value = "40")]
    hidden: String,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 2000)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// lm | gd
    #[arg(long, default_value = "lm")]
    trainer: String,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated stack of version images
    #[arg(long)]
    stack: String,
    #[arg(long, default_value = "3,3,3")]
    radii: String,
    #[arg(long, default_value_t = 3)]
    out_radius: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "est")]
    estimate: PathBuf,
    /// Clip window `b1,b2` for the windowed SNR (default -220,350)
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    ssim: bool,
    /// Measure FWHM through a noiseless FBP pipeline at this cut-off
    #[arg(long)]
    fwhm: Option<String>,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 360)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PwcDemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20000)]
    train_len: usize,
    #[arg(long, default_value_t = 300)]
    test_len: usize,
    #[arg(long, default_value_t = 20)]
    hidden: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 2000)]
    batch: usize,
    #[arg(long, default_value_t = 0.06)]
    noise_std: f64,
    /// lm | gd
    #[arg(long, default_value = "lm")]
    trainer: String,
    /// Write the clean/noisy test signals as 1-row TFR1 rasters
    #[arg(long)]
    write_signals: Option<String>,
}

fn parse_cutoff(text: &str) -> Result<f64, TomoError> {
    if text.eq_ignore_ascii_case("inf") || text.eq_ignore_ascii_case("infinity") {
        return Ok(f64::INFINITY);
    }
    text.parse()
        .map_err(|_| TomoError::Input(format!("bad cutoff `{text}`")))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, TomoError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| TomoError::Input(format!("bad {what} entry `{t}`")))
        })
        .collect()
}

fn parse_trainer(name: &str, batch: usize) -> Result<Trainer, TomoError> {
    match name {
        "lm" => Ok(Trainer::LevenbergMarquardt { batch }),
        "gd" => Ok(Trainer::GradientDescent { momentum: 0.9 }),
        other => Err(TomoError::Input(format!("unknown trainer `{other}`"))),
    }
}

fn metric(key: &str, value: impl std::fmt::Display) {
    println!("#METRIC {key}={value}");
}

fn cmd_phantom(args: &PhantomArgs) -> Result<(), TomoError> {
    let fov = args.size as f64 / 2.0 * args.pixel_size;
    let phantom = if let Some(file) = &args.file {
        io::read_phantom(file)?
    } else {
        match args.preset.as_deref() {
            Some("shepp-logan") | None => Phantom::shepp_logan(fov),
            Some("random-tissue") => Phantom::random_tissue(args.seed, fov),
            Some(other) => return Err(TomoError::Input(format!("unknown preset `{other}`"))),
        }
    };
    let image = scan::rasterize_phantom(&phantom, args.size, args.size, args.pixel_size);
    io::write_image(&args.output, &image)?;
    println!(
        "phantom: {} ellipses, {}x{} image -> {}",
        phantom.ellipses.len(),
        args.size,
        args.size,
        args.output.display()
    );
    metric("ellipses", phantom.ellipses.len());
    Ok(())
}

fn cmd_scan(args: &ScanArgs) -> Result<(), TomoError> {
    let image = io::read_image(&args.input)?;
    let mu = if args.attenuation {
        image
    } else {
        scan::hu_to_mu(&image)
    };
    let bins = args
        .bins
        .unwrap_or_else(|| scan::default_num_bins(mu.width(), mu.height()));
    let geom = ScanGeometry::new(args.views, bins, args.bin_spacing, args.blank)?;
    let sino = scan::radon_forward(&mu, &geom)?;
    let counts = scan::simulate_counts(&sino, args.seed, args.noiseless)?;
    io::write_counts(&args.output, &counts)?;
    let mean = counts.counts().iter().sum::<f64>() / counts.counts().len() as f64;
    let min = counts.counts().iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "scan: {} views x {} bins, blank {:.3e} -> {}",
        args.views,
        bins,
        args.blank,
        args.output.display()
    );
    metric("mean_counts", format!("{mean:.6}"));
    metric("min_counts", format!("{min}"));
    Ok(())
}

fn cmd_fbp(args: &FbpArgs) -> Result<(), TomoError> {
    let counts = io::read_counts(&args.input)?;
    let sino = scan::counts_to_sinogram(&counts);
    let params = FilterParams::new(parse_cutoff(&args.cutoff)?, args.order)?;
    let recon = fbp_reconstruct(&sino, &params, args.size, args.size, args.pixel_size)?;
    let out = if args.mu { recon } else { scan::mu_to_hu(&recon) };
    io::write_image(&args.output, &out)?;
    println!(
        "fbp: cutoff {} order {} -> {}",
        args.cutoff,
        args.order,
        args.output.display()
    );
    Ok(())
}

fn cmd_pwls(args: &PwlsArgs) -> Result<(), TomoError> {
    let counts = io::read_counts(&args.input)?;
    let sino = scan::counts_to_sinogram(&counts);
    let init_params = FilterParams::new(args.init_cutoff, 3)?;
    let init = fbp_reconstruct(&sino, &init_params, args.size, args.size, args.pixel_size)?;
    let params = PwlsParams {
        beta: args.beta,
        delta: args.delta,
        max_iters: args.iters,
        snapshot_every: args.snapshot_every,
        lbfgs_memory: args.memory,
    };
    let out = pwls_reconstruct(&counts, &init, &params)?;
    let convert = |img: &Image| if args.mu { img.clone() } else { scan::mu_to_hu(img) };
    io::write_image(&PathBuf::from(format!("{}_init.tfr", args.output)), &convert(&out.init))?;
    for (iter, img) in &out.snapshots {
        let path = PathBuf::from(format!("{}_it{}.tfr", args.output, iter));
        io::write_image(&path, &convert(img))?;
    }
    println!(
        "pwls: beta {:.3e} delta {} iters {} -> {} snapshots at {}_it<k>.tfr",
        args.beta,
        args.delta,
        args.iters,
        out.snapshots.len(),
        args.output
    );
    metric("snapshots", out.snapshots.len());
    metric("objective_start", format!("{:.6e}", out.trace.first().unwrap()));
    metric("objective_end", format!("{:.6e}", out.trace.last().unwrap()));
    if out.reason == StopReason::LineSearchFailed {
        return Err(TomoError::Numerical(
            "line search failed before the iteration budget".into(),
        ));
    }
    Ok(())
}

fn cmd_make_dataset(args: &MakeDatasetArgs) -> Result<(), TomoError> {
    if args.stack.len() != args.reference.len() {
        return Err(TomoError::Input(format!(
            "{} --stack groups but {} --ref images",
            args.stack.len(),
            args.reference.len()
        )));
    }
    let radii: Vec<usize> = parse_list(&args.radii, "radius")?;
    let mut pairs = Vec::new();
    for (stack_text, ref_path) in args.stack.iter().zip(&args.reference) {
        let stack: Vec<Image> = stack_text
            .split(',')
            .map(|p| io::read_image(std::path::Path::new(p.trim())))
            .collect::<Result<_, _>>()?;
        let reference = io::read_image(ref_path)?;
        pairs.push(TrainingPair { stack, reference });
    }
    let cfg = FusionConfig {
        radii,
        output_radius: args.out_radius,
        stride: args.stride,
        variance_prune_factor: args.var_prune,
        gradient_prune_factor: args.grad_prune,
        max_examples: args.max_examples,
        seed: args.seed,
    };
    let set = fusion::build_training_set(&pairs, &cfg)?;
    fusion::write_dataset(&args.output, &set)?;
    println!(
        "dataset: {} examples of {} features -> {}",
        set.len(),
        set.inputs.ncols(),
        args.output.display()
    );
    metric("examples", set.len());
    metric("features", set.inputs.ncols());
    metric("targets", set.targets.ncols());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), TomoError> {
    let set = fusion::read_dataset(&args.dataset)?;
    let hidden: Vec<usize> = parse_list(&args.hidden, "hidden size")?;
    let mut sizes = vec![set.inputs.ncols()];
    sizes.extend(&hidden);
    sizes.push(set.targets.ncols());
    let net = nn::NeuralNet::new(&sizes, args.seed)?;
    let cfg = TrainConfig {
        max_epochs: args.epochs,
        validation_fraction: args.val_frac,
        tolerance: 0.0,
        seed: args.seed,
        trainer: parse_trainer(&args.trainer, args.batch)?,
        ..TrainConfig::default()
    };
    let report = nn::train(net, &set, &cfg)?;
    nn::save_model(&report.net, &args.output)?;
    println!(
        "train: {:?} for {} epochs, loss {:.6e} -> {:.6e} -> {}",
        sizes,
        report.epochs_run,
        report.train_loss.first().unwrap(),
        report.train_loss.last().unwrap(),
        args.output.display()
    );
    metric("epochs_run", report.epochs_run);
    metric("final_train_loss", format!("{:.9e}", report.train_loss.last().unwrap()));
    if let Some(v) = report.val_loss.last() {
        metric("final_val_loss", format!("{v:.9e}"));
    }
    Ok(())
}

fn cmd_fuse(args: &FuseArgs) -> Result<(), TomoError> {
    let net = nn::load_model(&args.model)?;
    let stack: Vec<Image> = args
        .stack
        .split(',')
        .map(|p| io::read_image(std::path::Path::new(p.trim())))
        .collect::<Result<_, _>>()?;
    let cfg = FusionConfig {
        radii: parse_list(&args.radii, "radius")?,
        output_radius: args.out_radius,
        ..FusionConfig::fbp_default()
    };
    let fused = fusion::fuse(&stack, &net, &cfg)?;
    io::write_image(&args.output, &fused)?;
    println!("fuse: {} versions -> {}", stack.len(), args.output.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), TomoError> {
    let reference = io::read_image(&args.reference)?;
    let estimate = io::read_image(&args.estimate)?;
    let mask = metrics::object_mask(&reference);
    if mask.is_degenerate() {
        eprintln!("warning: degenerate reference histogram, using the whole image");
    }
    let snr = metrics::snr(&reference, &estimate, Some(&mask))?;
    println!("snr_db\t{snr:.4}");
    metric("snr_db", format!("{snr:.6}"));

    let window = match &args.window {
        Some(text) => {
            let vals: Vec<f64> = parse_list(text, "window bound")?;
            if vals.len() != 2 {
                return Err(TomoError::Input("window takes exactly b1,b2".into()));
            }
            HuWindow::new(vals[0], vals[1])?
        }
        None => HuWindow::soft_tissue(),
    };
    let wsnr = metrics::windowed_snr(&reference, &estimate, &window, Some(&mask))?;
    println!("windowed_snr_db\t{wsnr:.4}");
    metric("windowed_snr_db", format!("{wsnr:.6}"));

    if args.ssim {
        let params = SsimParams {
            dynamic_range: window.span(),
            ..SsimParams::default()
        };
        let clip = |img: &Image| img.map(|v| window.clip(v));
        let value = metrics::ssim(&clip(&reference), &clip(&estimate), &params)?;
        println!("ssim\t{value:.4}");
        metric("ssim", format!("{value:.6}"));
    }

    if let Some(cutoff_text) = &args.fwhm {
        let cutoff = parse_cutoff(cutoff_text)?;
        let geom = ScanGeometry::new(
            args.views,
            scan::default_num_bins(reference.width(), reference.height()),
            reference.pixel_size(),
            2e5,
        )?;
        let params = FilterParams::new(cutoff, 3)?;
        let width = reference.width();
        let height = reference.height();
        let ps = reference.pixel_size();
        let recon = move |img: &Image| {
            let mu = scan::hu_to_mu(img);
            let sino = scan::radon_forward(&mu, &geom)?;
            let rec = fbp_reconstruct(&sino, &params, width, height, ps)?;
            Ok(scan::mu_to_hu(&rec))
        };
        let probes = metrics::sample_probe_locations(&mask, args.probes, 17, args.seed);
        if probes.len() < args.probes {
            return Err(TomoError::Degenerate(
                "could not place the requested probes inside the mask".into(),
            ));
        }
        let fwhm = metrics::lir_fwhm(recon, &reference, &probes, metrics::LIR_SPIKE_AMPLITUDE)?;
        let mean = fwhm.iter().sum::<f64>() / fwhm.len() as f64;
        println!("fwhm_mean\t{mean:.4}");
        metric("fwhm_mean", format!("{mean:.6}"));
        metric("fwhm_probes", fwhm.len());
    }
    Ok(())
}

fn cmd_pwc_demo(args: &PwcDemoArgs) -> Result<(), TomoError> {
    let mut train_cfg = PwcConfig::with_length(args.train_len);
    train_cfg.noise_std = args.noise_std;
    let mut test_cfg = PwcConfig::with_length(args.test_len);
    test_cfg.noise_std = args.noise_std;
    let nn_cfg = TrainConfig {
        max_epochs: args.epochs,
        validation_fraction: 0.0,
        tolerance: 0.0,
        seed: args.seed,
        trainer: parse_trainer(&args.trainer, args.batch)?,
        ..TrainConfig::default()
    };
    let report = pwc::run_pwc_experiment(&train_cfg, &test_cfg, args.hidden, &nn_cfg, args.seed)?;
    println!("method\tsnr_db");
    println!("noisy\t{:.4}", report.snr_noisy);
    for (i, (w, s)) in train_cfg
        .kernel_widths
        .iter()
        .zip(&report.snr_filtered)
        .enumerate()
    {
        println!("gauss[{i}] width {w}\t{s:.4}");
    }
    println!("best_filtered\t{:.4}", report.snr_best_filtered);
    println!("fused\t{:.4}", report.snr_fused);
    metric("snr_noisy_db", format!("{:.6}", report.snr_noisy));
    metric("snr_best_filtered_db", format!("{:.6}", report.snr_best_filtered));
    metric("snr_fused_db", format!("{:.6}", report.snr_fused));
    metric("feature_len", report.feature_len);

    if let Some(prefix) = &args.write_signals {
        let clean = pwc::generate_pwc(&test_cfg, args.seed.wrapping_mul(4).wrapping_add(3))?;
        let noisy = pwc::add_noise(&clean, test_cfg.noise_std, args.seed.wrapping_mul(4).wrapping_add(4));
        for (name, data) in [("clean", &clean), ("noisy", &noisy)] {
            let img = Image::from_data(data.len(), 1, 1.0, data.clone())?;
            io::write_image(&PathBuf::from(format!("{prefix}_{name}.tfr")), &img)?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), TomoError> {
    tomofuse::configure_threads(cli.threads);
    match &cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Scan(args) => cmd_scan(args),
        Command::Fbp(args) => cmd_fbp(args),
        Command::Pwls(args) => cmd_pwls(args),
        Command::MakeDataset(args) => cmd_make_dataset(args),
        Command::Train(args) => cmd_train(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::PwcDemo(args) => cmd_pwc_demo(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes --help/--version through the error path with success
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TomoError::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
