//! `psrecon`: command-line front end for the partially separable dynamic
//! MRI pipeline. phantom -> mask/coils -> undersample -> calibrate ->
//! recon/train -> eval -> export-pgm.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;

use psrecon_core::hankel::{SpatialFilterBank, TemporalFilter};
use psrecon_core::hqs::{
    reconstruct, FilterBank, Hyperparams, SolverConfig, SolverMode, OBJECTIVE_CSV_HEADER,
};
use psrecon_core::io;
use psrecon_core::learn::{
    train, write_params, LearnableParams, TrainConfig, TrainingPair, TRAIN_CSV_HEADER,
};
use psrecon_core::metrics::{report, PeakMode};
use psrecon_core::ps_model::{
    calibrate_nullspace, generate_phantom, prony_filter, spatial_filter_default, PhantomConfig,
};
use psrecon_core::sampling::{encode, make_coils, make_mask, CoilSet};

use config::{CliError, Settings};

#[derive(Parser)]
#[command(
    name = "psrecon",
    version,
    about = "Partially separable dynamic MRI reconstruction pipeline"
)]
struct Cli {
    /// Cap internal parallelism at N threads
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value config file; explicit flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic partially separable phantom
    Phantom(PhantomArgs),
    /// Generate a per-frame Cartesian undersampling mask
    Mask(MaskArgs),
    /// Generate sum-of-squares-normalized coil sensitivity maps
    Coils(CoilsArgs),
    /// Apply coils, Fourier transform, and mask to an image volume
    Undersample(UndersampleArgs),
    /// Calibrate a temporal annihilating filter from training data
    Calibrate(CalibrateArgs),
    /// Reconstruct an image volume from undersampled measurements
    Recon(ReconArgs),
    /// Train unrolled solver weights on synthetic pairs
    Train(TrainArgs),
    /// Evaluate a reconstruction against a reference (MSE/PSNR/SSIM)
    Eval(EvalArgs),
    /// Export magnitude frames as 8-bit PGM images
    ExportPgm(ExportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long = "root-min")]
    root_min: Option<f64>,
    #[arg(long = "root-max")]
    root_max: Option<f64>,
    /// Constant-in-time volume (all temporal roots pinned to 1)
    #[arg(long)]
    constant: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    accel: Option<f64>,
    #[arg(long)]
    acs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CoilsArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UndersampleArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    coils: Option<PathBuf>,
    /// Per-coil outputs are written as <prefix>_c00.psnt, _c01.psnt, ...
    #[arg(long = "out-prefix")]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Training volume(s); repeatable
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Hankel window length (filter length, order + 1)
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconArgs {
    /// Prefix of the per-coil measurement files from `undersample`
    #[arg(long = "y-prefix")]
    y_prefix: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    coils: Option<PathBuf>,
    /// Temporal annihilating filter file
    #[arg(long)]
    filter: Option<PathBuf>,
    /// Spatial filter bank file (default: normalized Laplacian)
    #[arg(long = "spatial-bank")]
    spatial_bank: Option<PathBuf>,
    /// paper | exact
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    rho0: Option<f64>,
    #[arg(long)]
    rho1: Option<f64>,
    #[arg(long)]
    rho2: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Objective log CSV (one row per sweep)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    accel: Option<f64>,
    #[arg(long)]
    acs: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long = "coil-count")]
    coil_count: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "lr-hyper")]
    lr_hyper: Option<f64>,
    #[arg(long = "lr-taps")]
    lr_taps: Option<f64>,
    /// Initial hyperparameters (trained from here)
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    rho0: Option<f64>,
    #[arg(long)]
    rho1: Option<f64>,
    #[arg(long)]
    rho2: Option<f64>,
    /// Independent weights per sweep instead of tied
    #[arg(long)]
    untied: bool,
    /// Initial temporal filter (default: binomial of the given order)
    #[arg(long)]
    filter: Option<PathBuf>,
    /// Learned weights output (.psnp)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss history CSV
    #[arg(long)]
    history: Option<PathBuf>,
    /// Learned temporal filter exported as a PSNT filter file
    #[arg(long = "filter-out")]
    filter_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    recon: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// reference | output
    #[arg(long = "peak-mode")]
    peak_mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long = "out-prefix")]
    out_prefix: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        // a pool may already exist in tests that call main twice; ignore
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.cmd {
        Command::Phantom(a) => cmd_phantom(a, config),
        Command::Mask(a) => cmd_mask(a, config),
        Command::Coils(a) => cmd_coils(a, config),
        Command::Undersample(a) => cmd_undersample(a, config),
        Command::Calibrate(a) => cmd_calibrate(a, config),
        Command::Recon(a) => cmd_recon(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::ExportPgm(a) => cmd_export_pgm(a, config),
    }
}

fn cmd_phantom(a: PhantomArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("phantom", config)?;
    let cfg = PhantomConfig {
        seed: s.require(a.seed, "seed")?,
        nx: s.get(a.nx, "nx", 64)?,
        ny: s.get(a.ny, "ny", 64)?,
        nt: s.get(a.nt, "nt", 16)?,
        order: s.get(a.order, "order", 3)?,
        noise_level: s.get(a.noise, "noise", 0.0)?,
        root_modulus_min: s.get(a.root_min, "root-min", 0.97)?,
        root_modulus_max: s.get(a.root_max, "root-max", 1.0)?,
        constant: s.get_bool(a.constant, "constant")?,
    };
    let out: PathBuf = s.require(a.out, "out")?;
    let (volume, roots) = generate_phantom(&cfg)?;
    for (l, r) in roots.iter().enumerate() {
        s.note(&format!("root{l}"), format!("{:.17e},{:.17e}", r.re, r.im));
    }
    io::write_volume(&out, &volume)?;
    s.write_manifest(&out)?;
    Ok(())
}

fn cmd_mask(a: MaskArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("mask", config)?;
    let seed = s.require(a.seed, "seed")?;
    let nx = s.get(a.nx, "nx", 64)?;
    let ny = s.get(a.ny, "ny", 64)?;
    let nt = s.get(a.nt, "nt", 16)?;
    let accel = s.get(a.accel, "accel", 4.0)?;
    let acs = s.get(a.acs, "acs", 4)?;
    let out: PathBuf = s.require(a.out, "out")?;
    let mask = make_mask(nx, ny, nt, accel, acs, seed)?;
    io::write_mask(&out, &mask)?;
    s.write_manifest(&out)?;
    Ok(())
}

fn cmd_coils(a: CoilsArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("coils", config)?;
    let seed = s.require(a.seed, "seed")?;
    let nx = s.get(a.nx, "nx", 64)?;
    let ny = s.get(a.ny, "ny", 64)?;
    let count = s.get(a.count, "count", 1)?;
    let out: PathBuf = s.require(a.out, "out")?;
    let coils = make_coils(nx, ny, count, seed)?;
    io::write_coils(&out, &coils)?;
    s.write_manifest(&out)?;
    Ok(())
}

fn coil_path(prefix: &Path, i: usize) -> PathBuf {
    PathBuf::from(format!("{}_c{i:02}.psnt", prefix.display()))
}

fn cmd_undersample(a: UndersampleArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("undersample", config)?;
    let input: PathBuf = s.require(a.input, "input")?;
    let mask_path: PathBuf = s.require(a.mask, "mask")?;
    let coils_path: PathBuf = s.require(a.coils, "coils")?;
    let prefix: PathBuf = s.require(a.out_prefix, "out-prefix")?;
    let gamma = io::read_volume(&input)?;
    let mask = io::read_mask(&mask_path)?;
    let coils = io::read_coils(&coils_path)?;
    let y = encode(&gamma, &coils, &mask)?;
    for (i, yi) in y.iter().enumerate() {
        io::write_volume(&coil_path(&prefix, i), yi)?;
    }
    s.note("coil-files", y.len());
    s.write_manifest(&prefix)?;
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("calibrate", config)?;
    if a.input.is_empty() {
        return Err(CliError::usage("missing required --input"));
    }
    let window = s.require(a.window, "window")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let mut training = Vec::with_capacity(a.input.len());
    for (i, p) in a.input.iter().enumerate() {
        s.note(&format!("input{i}"), p.display());
        training.push(io::read_volume(p)?);
    }
    let result = calibrate_nullspace(&training, window)?;
    io::write_temporal_filter(&out, &result.filter)?;
    s.note("residual", format!("{:.17e}", result.residual));
    if let (Some(max), Some(min)) = (result.singular_values.first(), result.singular_values.last())
    {
        s.note("sigma-max", format!("{max:.17e}"));
        s.note("sigma-min", format!("{min:.17e}"));
    }
    s.write_manifest(&out)?;
    println!("residual {:.6e}", result.residual);
    Ok(())
}

fn read_measurements(prefix: &Path, count: usize) -> Result<Vec<psrecon_core::ComplexVolume>, CliError> {
    let mut y = Vec::with_capacity(count);
    for i in 0..count {
        y.push(io::read_volume(&coil_path(prefix, i))?);
    }
    Ok(y)
}

fn cmd_recon(a: ReconArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("recon", config)?;
    let y_prefix: PathBuf = s.require(a.y_prefix, "y-prefix")?;
    let mask_path: PathBuf = s.require(a.mask, "mask")?;
    let coils_path: PathBuf = s.require(a.coils, "coils")?;
    let filter_path: PathBuf = s.require(a.filter, "filter")?;
    let mode_str: String = s.get(a.mode, "mode", "paper".to_string())?;
    let mode = match mode_str.as_str() {
        "paper" => SolverMode::Paper,
        "exact" => SolverMode::Exact,
        other => return Err(CliError::validation(format!("unknown mode {other}"))),
    };
    let iterations = s.get(a.iters, "iters", 10)?;
    let hyper = Hyperparams {
        lambda1: s.get(a.lambda1, "lambda1", 1.0)?,
        lambda2: s.get(a.lambda2, "lambda2", 1.0)?,
        rho0: s.get(a.rho0, "rho0", 1.0)?,
        rho1: s.get(a.rho1, "rho1", 1.0)?,
        rho2: s.get(a.rho2, "rho2", 1.0)?,
    };
    let spatial_bank_path: Option<PathBuf> = s.optional(a.spatial_bank, "spatial-bank")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let log_path: Option<PathBuf> = s.optional(a.log, "log")?;

    let mask = io::read_mask(&mask_path)?;
    let coils = io::read_coils(&coils_path)?;
    let h_ps = io::read_temporal_filter(&filter_path)?;
    let h_s = match &spatial_bank_path {
        Some(p) => io::read_spatial_bank(p)?,
        None => SpatialFilterBank::shared(spatial_filter_default()),
    };
    let y = read_measurements(&y_prefix, coils.count())?;
    let cfg = SolverConfig { mode, iterations, hyper, filters: FilterBank { h_ps, h_s } };
    let (gamma, log) = reconstruct(&y, &mask, &coils, &cfg)?;
    io::write_volume(&out, &gamma)?;
    if let Some(p) = &log_path {
        let rows: Vec<Vec<f64>> =
            log.iter().enumerate().map(|(i, o)| o.csv_row(i + 1)).collect();
        io::write_csv(p, &OBJECTIVE_CSV_HEADER, &rows)?;
    }
    s.write_manifest(&out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("train", config)?;
    let seed = s.require(a.seed, "seed")?;
    let pairs_n = s.get(a.pairs, "pairs", 10)?;
    let nx = s.get(a.nx, "nx", 32)?;
    let ny = s.get(a.ny, "ny", 32)?;
    let nt = s.get(a.nt, "nt", 8)?;
    let order = s.get(a.order, "order", 3)?;
    let accel = s.get(a.accel, "accel", 4.0)?;
    let acs = s.get(a.acs, "acs", 4)?;
    let noise = s.get(a.noise, "noise", 1e-2)?;
    let coil_count = s.get(a.coil_count, "coil-count", 1)?;
    let depth = s.get(a.depth, "depth", 5)?;
    let steps = s.get(a.steps, "steps", 100)?;
    let lr_hyper = s.get(a.lr_hyper, "lr-hyper", 1e-2)?;
    let lr_taps = s.get(a.lr_taps, "lr-taps", 1e-3)?;
    // small lambdas keep the initial unrolled cell non-expansive
    let hyper0 = Hyperparams {
        lambda1: s.get(a.lambda1, "lambda1", 0.1)?,
        lambda2: s.get(a.lambda2, "lambda2", 0.1)?,
        rho0: s.get(a.rho0, "rho0", 1.0)?,
        rho1: s.get(a.rho1, "rho1", 1.0)?,
        rho2: s.get(a.rho2, "rho2", 1.0)?,
    };
    let untied = s.get_bool(a.untied, "untied")?;
    let filter_path: Option<PathBuf> = s.optional(a.filter, "filter")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let history_path: Option<PathBuf> = s.optional(a.history, "history")?;
    let filter_out: Option<PathBuf> = s.optional(a.filter_out, "filter-out")?;

    let mut pairs = Vec::with_capacity(pairs_n);
    for p in 0..pairs_n as u64 {
        let pcfg = PhantomConfig {
            seed: seed.wrapping_add(p),
            nx,
            ny,
            nt,
            order,
            noise_level: noise,
            ..Default::default()
        };
        let (truth, _) = generate_phantom(&pcfg)?;
        let mask = make_mask(nx, ny, nt, accel, acs, seed.wrapping_add(1000 + p))?;
        let coils = if coil_count == 1 {
            CoilSet::identity(nx, ny)
        } else {
            make_coils(nx, ny, coil_count, seed.wrapping_add(2000 + p))?
        };
        let y = encode(&truth, &coils, &mask)?;
        pairs.push(TrainingPair { y, mask, coils, truth });
    }

    let hps_init = match &filter_path {
        Some(p) => io::read_temporal_filter(p)?,
        None => prony_filter(&vec![Complex64::new(1.0, 0.0); order])?.normalized(),
    };
    let mut params =
        LearnableParams::tied(&hyper0, &hps_init, &spatial_filter_default(), depth)?;
    if untied {
        params = params.untie();
    }
    let tcfg = TrainConfig { steps, lr_hyper, lr_taps };
    let (trained, history) = train(&params, &pairs, &tcfg)?;
    write_params(&out, &trained)?;
    if let Some(p) = &history_path {
        let rows: Vec<Vec<f64>> = history
            .iter()
            .map(|r| vec![r.step as f64, r.loss, r.grad_norm])
            .collect();
        io::write_csv(p, &TRAIN_CSV_HEADER, &rows)?;
    }
    if let Some(p) = &filter_out {
        let f = TemporalFilter::new(trained.sweeps[0].hps_taps.clone())?;
        io::write_temporal_filter(p, &f)?;
    }
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        s.note("loss-initial", format!("{:.17e}", first.loss));
        s.note("loss-final", format!("{:.17e}", last.loss));
        println!("loss {:.6e} -> {:.6e}", first.loss, last.loss);
    }
    s.write_manifest(&out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("eval", config)?;
    let recon_path: PathBuf = s.require(a.recon, "recon")?;
    let ref_path: PathBuf = s.require(a.reference, "reference")?;
    let mode_str: String = s.get(a.peak_mode, "peak-mode", "reference".to_string())?;
    let peak_mode = match mode_str.as_str() {
        "reference" => PeakMode::Reference,
        "output" => PeakMode::Output,
        other => return Err(CliError::validation(format!("unknown peak-mode {other}"))),
    };
    let out: PathBuf = s.require(a.out, "out")?;
    let recon = io::read_volume(&recon_path)?;
    let reference = io::read_volume(&ref_path)?;
    let reports = report(&[(recon, reference)], peak_mode, &out)?;
    let r = &reports[0];
    s.note("mse", format!("{:.17e}", r.mse));
    s.note("psnr-db", format!("{:.17e}", r.psnr_db));
    s.note("ssim", format!("{:.17e}", r.ssim));
    println!("mse {:.6e} psnr {:.3} dB ssim {:.6}", r.mse, r.psnr_db, r.ssim);
    s.write_manifest(&out)?;
    Ok(())
}

fn cmd_export_pgm(a: ExportArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("export-pgm", config)?;
    let input: PathBuf = s.require(a.input, "input")?;
    let prefix: PathBuf = s.require(a.out_prefix, "out-prefix")?;
    let v = io::read_volume(&input)?;
    let files = io::export_pgm(&prefix, &v)?;
    s.note("frames", files.len());
    s.write_manifest(&prefix)?;
    Ok(())
}
