//! Command-line front end: simulate patterns, estimate summary curves from
//! pattern files, precompute normalizer grids, and run replication
//! experiments from flat config files.

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use ppstat::curve::{default_r_grid, default_t_grid, CurveEstimate};
use ppstat::estimators_k::{k12_global_iso, k12_local_iso, k_global_iso, k_local_iso, l_transform};
use ppstat::estimators_pcf::{
    c_global_iso, c_local_iso, g_global_iso, g_local_iso, Kernel1d, LocalIsoForm,
};
use ppstat::gamma::{
    build_interpolated_cross_iso, build_interpolated_iso, GammaFunction, SampleBank,
};
use ppstat::geometry::Window;
use ppstat::harness::{
    run_experiment_with_mode, BandwidthMethod, ExperimentConfig, IntensityKind, ProcessKind,
    ProfileKind,
};
use ppstat::intensity::{
    bandwidth_cvl, bandwidth_lcv, default_pcf_bandwidth, default_sigma_grid, IntensityModel,
    Kernel2d, ParametricIntensity,
};
use ppstat::pattern::{load_auto, BivariatePattern, LoadedPattern, PointPattern};
use ppstat::simulate::{
    derive_seed, simulate_lgcp, simulate_poisson_fn, LgcpSpec, RetentionProfile,
};

type CliError = Box<dyn Error + Send + Sync>;

#[derive(Parser)]
#[command(
    name = "ppstat",
    about = "Second-order summary statistics for inhomogeneous spatial point patterns",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a point pattern and write it as CSV (x,y or x,y,mark)
    Simulate {
        /// Process family: poisson, lgcp, or poisson_pair
        #[arg(long, value_parser = ProcessKind::parse)]
        process: ProcessKind,
        /// Intensity shape: constant, hole, waves, deep_waves, or lgf
        #[arg(long, value_parser = ProfileKind::parse, default_value = "constant")]
        profile: ProfileKind,
        /// Expected number of points (per component for pairs)
        #[arg(long)]
        n_expected: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Observation window as x0,y0,x1,y1
        #[arg(long, value_parser = parse_window, default_value = "0,0,1,1")]
        window: Window,
        /// Output pattern CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a summary curve from a pattern file and write it as CSV
    Estimate {
        /// Input pattern CSV (x,y rows; x,y,mark for bivariate)
        #[arg(long)]
        pattern: PathBuf,
        /// One of: k_global_iso, k_local_iso, k12_global_iso, k12_local_iso,
        /// g_global_iso, g_local_iso, c_global_iso, c_local_iso
        #[arg(long)]
        estimator: String,
        /// Intensity model: known, parametric, kernel, or kernel-leaveout
        #[arg(long, value_parser = IntensityKind::parse, default_value = "known")]
        intensity: IntensityKind,
        /// Smoothing bandwidth for kernel intensities: cvl, lcv, or fixed:<sigma>;
        /// data-driven methods select from this pattern (first component for pairs)
        #[arg(long, value_parser = BandwidthMethod::parse, default_value = "cvl")]
        bandwidth: BandwidthMethod,
        /// Intensity shape for known and parametric models
        #[arg(long, value_parser = ProfileKind::parse, default_value = "constant")]
        profile: ProfileKind,
        /// Expected point count for the known model (default: observed count)
        #[arg(long)]
        n_expected: Option<f64>,
        /// Pair correlation smoothing bandwidth (default: 0.15/sqrt(n), clamped)
        #[arg(long)]
        pcf_bandwidth: Option<f64>,
        /// Normalizer Monte Carlo precision target
        #[arg(long, default_value_t = 0.005)]
        alpha: f64,
        /// Reuse a normalizer grid written by the gamma subcommand
        #[arg(long)]
        gamma_cache: Option<PathBuf>,
        /// Report sqrt(K/pi) - t instead of K (K estimators only)
        #[arg(long)]
        l_transform: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_window, default_value = "0,0,1,1")]
        window: Window,
        /// Output curve CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute an interpolated isotropic normalizer grid as a cache CSV
    Gamma {
        /// Input pattern CSV; optional for the known model
        #[arg(long)]
        pattern: Option<PathBuf>,
        #[arg(long, value_parser = IntensityKind::parse, default_value = "known")]
        intensity: IntensityKind,
        #[arg(long, value_parser = BandwidthMethod::parse, default_value = "cvl")]
        bandwidth: BandwidthMethod,
        #[arg(long, value_parser = ProfileKind::parse, default_value = "constant")]
        profile: ProfileKind,
        /// Expected point count for the known model without a pattern file
        #[arg(long)]
        n_expected: Option<f64>,
        /// Largest separation covered by the grid
        #[arg(long, default_value_t = 0.14)]
        r_max: f64,
        /// Requested node spacing (kernel models tighten it to sigma/10)
        #[arg(long, default_value_t = 0.005)]
        spacing: f64,
        #[arg(long, default_value_t = 0.005)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_window, default_value = "0,0,1,1")]
        window: Window,
        /// Output cache CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replication experiment described by a key = value config file
    Experiment {
        /// Config file (keys: process, profile, n_expected, replicates,
        /// estimators, bandwidth, alpha, r_max, seed, outdir)
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's outdir)
        #[arg(long)]
        outdir: Option<PathBuf>,
        /// Run replicates one at a time instead of on the worker pool
        #[arg(long)]
        serial: bool,
    },
}

fn parse_window(s: &str) -> Result<Window, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected x0,y0,x1,y1, got {s:?}"));
    }
    let mut v = [0.0; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| format!("bad coordinate {part:?}"))?;
    }
    Window::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { process, profile, n_expected, seed, window, out } => {
            cmd_simulate(process, profile, n_expected, seed, window, &out)
        }
        Command::Estimate {
            pattern,
            estimator,
            intensity,
            bandwidth,
            profile,
            n_expected,
            pcf_bandwidth,
            alpha,
            gamma_cache,
            l_transform,
            seed,
            window,
            out,
        } => cmd_estimate(EstimateArgs {
            pattern,
            estimator,
            intensity,
            bandwidth,
            profile,
            n_expected,
            pcf_bandwidth,
            alpha,
            gamma_cache,
            apply_l: l_transform,
            seed,
            window,
            out,
        }),
        Command::Gamma {
            pattern,
            intensity,
            bandwidth,
            profile,
            n_expected,
            r_max,
            spacing,
            alpha,
            seed,
            window,
            out,
        } => cmd_gamma(GammaArgs {
            pattern,
            intensity,
            bandwidth,
            profile,
            n_expected,
            r_max,
            spacing,
            alpha,
            seed,
            window,
            out,
        }),
        Command::Experiment { config, outdir, serial } => cmd_experiment(&config, outdir, serial),
    }
}

/// Static profile, or a fresh log-Gaussian one realized from the seed.
fn make_profile(kind: ProfileKind, window: &Window, seed: u64) -> Result<RetentionProfile, CliError> {
    match kind.static_profile() {
        Some(p) => Ok(p),
        None => Ok(RetentionProfile::lgf(window, derive_seed(seed, 3, 0))?),
    }
}

fn cmd_simulate(
    process: ProcessKind,
    profile_kind: ProfileKind,
    n_expected: f64,
    seed: u64,
    window: Window,
    out: &std::path::Path,
) -> Result<(), CliError> {
    if !(n_expected > 0.0) || !n_expected.is_finite() {
        return Err(format!("n_expected must be positive, got {n_expected}").into());
    }
    let profile = make_profile(profile_kind, &window, seed)?;
    let rho0 = n_expected / profile.integral(&window);
    match process {
        ProcessKind::Poisson => {
            let p = profile.clone();
            let pattern =
                simulate_poisson_fn(&window, move |u| rho0 * p.eval(u), rho0, derive_seed(seed, 10, 0))?;
            pattern.to_csv(out, true)?;
            println!("wrote {} points to {}", pattern.n(), out.display());
        }
        ProcessKind::Lgcp => {
            let spec = LgcpSpec::thinned(n_expected, profile);
            let pattern = simulate_lgcp(&window, &spec, derive_seed(seed, 10, 0))?;
            pattern.to_csv(out, true)?;
            println!("wrote {} points to {}", pattern.n(), out.display());
        }
        ProcessKind::PoissonPair => {
            let p1 = profile.clone();
            let p2 = profile.clone();
            let first =
                simulate_poisson_fn(&window, move |u| rho0 * p1.eval(u), rho0, derive_seed(seed, 10, 0))?;
            let second =
                simulate_poisson_fn(&window, move |u| rho0 * p2.eval(u), rho0, derive_seed(seed, 11, 0))?;
            let biv =
                BivariatePattern::new(first.points().to_vec(), second.points().to_vec(), window)?;
            biv.to_csv(out, true)?;
            println!(
                "wrote {} + {} marked points to {}",
                biv.first().n(),
                biv.second().n(),
                out.display()
            );
        }
    }
    Ok(())
}

struct EstimateArgs {
    pattern: PathBuf,
    estimator: String,
    intensity: IntensityKind,
    bandwidth: BandwidthMethod,
    profile: ProfileKind,
    n_expected: Option<f64>,
    pcf_bandwidth: Option<f64>,
    alpha: f64,
    gamma_cache: Option<PathBuf>,
    apply_l: bool,
    seed: u64,
    window: Window,
    out: PathBuf,
}

fn select_sigma(
    method: BandwidthMethod,
    pattern: &PointPattern,
    window: &Window,
) -> Result<f64, CliError> {
    let sigma = match method {
        BandwidthMethod::Fixed(v) => v,
        BandwidthMethod::Cvl => bandwidth_cvl(pattern, &default_sigma_grid(window))?,
        BandwidthMethod::Lcv => bandwidth_lcv(pattern, &default_sigma_grid(window))?,
    };
    Ok(sigma)
}

fn build_cli_model(
    kind: IntensityKind,
    pattern: &PointPattern,
    profile: &RetentionProfile,
    coverage: f64,
    n_expected: Option<f64>,
    sigma: f64,
) -> Result<Arc<IntensityModel>, CliError> {
    let model = match kind {
        IntensityKind::Known => {
            let rho0 = n_expected.unwrap_or(pattern.n() as f64) / coverage;
            let p = profile.clone();
            IntensityModel::known(move |u| rho0 * p.eval(u))
        }
        IntensityKind::Parametric => {
            let p = profile.clone();
            IntensityModel::parametric(ParametricIntensity::new(
                move |u| p.eval(u),
                pattern.n(),
                pattern.window(),
            )?)
        }
        IntensityKind::Kernel => IntensityModel::kernel(pattern, Kernel2d::new(sigma)?),
        IntensityKind::KernelLeaveOut => {
            IntensityModel::kernel_leave_out(pattern, Kernel2d::new(sigma)?)
        }
    };
    Ok(Arc::new(model))
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let window = args.window;
    let loaded = load_auto(&args.pattern, window)?;
    let profile = make_profile(args.profile, &window, args.seed)?;
    let coverage = profile.integral(&window);
    let bank = Arc::new(SampleBank::new(derive_seed(args.seed, 1, 0), window));

    let id = args.estimator.as_str();
    let pair_id = matches!(id, "k12_global_iso" | "k12_local_iso" | "c_global_iso" | "c_local_iso");
    let known_id = matches!(
        id,
        "k_global_iso"
            | "k_local_iso"
            | "g_global_iso"
            | "g_local_iso"
            | "k12_global_iso"
            | "k12_local_iso"
            | "c_global_iso"
            | "c_local_iso"
    );
    if !known_id {
        return Err(format!("unknown estimator {id:?}").into());
    }
    let pcf_id = matches!(id, "g_global_iso" | "g_local_iso" | "c_global_iso" | "c_local_iso");
    if args.apply_l && pcf_id {
        return Err("--l-transform applies to K estimators only".into());
    }

    // one bandwidth selection per run, shared by both components of a pair
    let selection_pattern = match &loaded {
        LoadedPattern::Univariate(p) => p,
        LoadedPattern::Bivariate(b) => b.first(),
    };
    let sigma = if args.intensity.is_kernel() {
        let s = select_sigma(args.bandwidth, selection_pattern, &window)?;
        println!("sigma = {s}");
        s
    } else {
        0.0
    };
    let n_obs = match &loaded {
        LoadedPattern::Univariate(p) => p.n(),
        LoadedPattern::Bivariate(b) => b.first().n() + b.second().n(),
    };
    let b = match args.pcf_bandwidth {
        Some(v) => v,
        None => default_pcf_bandwidth(args.n_expected.unwrap_or(n_obs as f64)),
    };

    let t_grid = default_t_grid();
    let r_grid = default_r_grid();
    let gamma_reach = |grid: &[f64], kern_reach: f64| grid.last().unwrap() + kern_reach;
    let load_cache = |path: &PathBuf| -> Result<GammaFunction, CliError> {
        Ok(GammaFunction::load_iso_csv(path)?)
    };

    let curve: CurveEstimate = match &loaded {
        LoadedPattern::Univariate(pattern) => {
            if pair_id {
                return Err(format!("estimator {id} needs a marked x,y,mark pattern file").into());
            }
            let model = build_cli_model(
                args.intensity,
                pattern,
                &profile,
                coverage,
                args.n_expected,
                sigma,
            )?;
            match id {
                "k_global_iso" => {
                    let gamma = match &args.gamma_cache {
                        Some(path) => load_cache(path)?,
                        None => build_interpolated_iso(
                            &model,
                            &bank,
                            gamma_reach(&t_grid, 0.0),
                            0.005,
                            args.alpha,
                        )?,
                    };
                    k_global_iso(pattern, &gamma, &t_grid)?
                }
                "k_local_iso" => k_local_iso(pattern, &model, &t_grid)?,
                "g_global_iso" => {
                    let kern = Kernel1d::new(b)?;
                    let gamma = match &args.gamma_cache {
                        Some(path) => load_cache(path)?,
                        None => build_interpolated_iso(
                            &model,
                            &bank,
                            gamma_reach(&r_grid, kern.cutoff()),
                            0.005,
                            args.alpha,
                        )?,
                    };
                    g_global_iso(pattern, &gamma, &kern, &r_grid)?
                }
                "g_local_iso" => {
                    let kern = Kernel1d::new(b)?;
                    g_local_iso(pattern, &model, &kern, &r_grid, LocalIsoForm::Hat)?
                }
                _ => unreachable!(),
            }
        }
        LoadedPattern::Bivariate(biv) => {
            if !pair_id {
                return Err(format!("estimator {id} needs an unmarked x,y pattern file").into());
            }
            let m1 = build_cli_model(
                args.intensity,
                biv.first(),
                &profile,
                coverage,
                args.n_expected,
                sigma,
            )?;
            let m2 = build_cli_model(
                args.intensity,
                biv.second(),
                &profile,
                coverage,
                args.n_expected,
                sigma,
            )?;
            let cross_gamma = |reach: f64| -> Result<GammaFunction, CliError> {
                match &args.gamma_cache {
                    Some(path) => load_cache(path),
                    None => Ok(build_interpolated_cross_iso(&m1, &m2, &bank, reach, 0.005, args.alpha)?),
                }
            };
            match id {
                "k12_global_iso" => {
                    let gamma = cross_gamma(gamma_reach(&t_grid, 0.0))?;
                    k12_global_iso(biv, &gamma, &t_grid)?
                }
                "k12_local_iso" => k12_local_iso(biv, &m1, &m2, &t_grid)?,
                "c_global_iso" => {
                    let kern = Kernel1d::new(b)?;
                    let gamma = cross_gamma(gamma_reach(&r_grid, kern.cutoff()))?;
                    c_global_iso(biv, &gamma, &kern, &r_grid)?
                }
                "c_local_iso" => {
                    let kern = Kernel1d::new(b)?;
                    c_local_iso(biv, &m1, &m2, &kern, &r_grid)?
                }
                _ => unreachable!(),
            }
        }
    };

    let curve = if args.apply_l { l_transform(&curve)? } else { curve };
    curve.write_csv(&args.out)?;
    println!("wrote {} curve ({} nodes) to {}", curve.meta.estimator, curve.len(), args.out.display());
    Ok(())
}

struct GammaArgs {
    pattern: Option<PathBuf>,
    intensity: IntensityKind,
    bandwidth: BandwidthMethod,
    profile: ProfileKind,
    n_expected: Option<f64>,
    r_max: f64,
    spacing: f64,
    alpha: f64,
    seed: u64,
    window: Window,
    out: PathBuf,
}

fn cmd_gamma(args: GammaArgs) -> Result<(), CliError> {
    let window = args.window;
    let profile = make_profile(args.profile, &window, args.seed)?;
    let coverage = profile.integral(&window);
    let bank = Arc::new(SampleBank::new(derive_seed(args.seed, 1, 0), window));

    let gamma = match &args.pattern {
        None => {
            if args.intensity != IntensityKind::Known {
                return Err(format!(
                    "{} intensity needs a pattern file",
                    args.intensity.label()
                )
                .into());
            }
            let n = args
                .n_expected
                .ok_or("known model without a pattern file needs --n-expected")?;
            let rho0 = n / coverage;
            let p = profile.clone();
            let model = Arc::new(IntensityModel::known(move |u| rho0 * p.eval(u)));
            build_interpolated_iso(&model, &bank, args.r_max, args.spacing, args.alpha)?
        }
        Some(path) => match load_auto(path, window)? {
            LoadedPattern::Univariate(pattern) => {
                let sigma = if args.intensity.is_kernel() {
                    select_sigma(args.bandwidth, &pattern, &window)?
                } else {
                    0.0
                };
                let model = build_cli_model(
                    args.intensity,
                    &pattern,
                    &profile,
                    coverage,
                    args.n_expected,
                    sigma,
                )?;
                build_interpolated_iso(&model, &bank, args.r_max, args.spacing, args.alpha)?
            }
            LoadedPattern::Bivariate(biv) => {
                let sigma = if args.intensity.is_kernel() {
                    select_sigma(args.bandwidth, biv.first(), &window)?
                } else {
                    0.0
                };
                let m1 = build_cli_model(
                    args.intensity,
                    biv.first(),
                    &profile,
                    coverage,
                    args.n_expected,
                    sigma,
                )?;
                let m2 = build_cli_model(
                    args.intensity,
                    biv.second(),
                    &profile,
                    coverage,
                    args.n_expected,
                    sigma,
                )?;
                build_interpolated_cross_iso(&m1, &m2, &bank, args.r_max, args.spacing, args.alpha)?
            }
        },
    };

    gamma.save_iso_csv(&args.out)?;
    println!("wrote normalizer grid to {}", args.out.display());
    Ok(())
}

fn cmd_experiment(
    config_path: &std::path::Path,
    outdir: Option<PathBuf>,
    serial: bool,
) -> Result<(), CliError> {
    let mut config = ExperimentConfig::from_file(config_path)?;
    if let Some(dir) = outdir {
        config.outdir = Some(dir);
    }
    let dir = config
        .outdir
        .clone()
        .ok_or("no output directory: set outdir in the config or pass --outdir")?;
    let summary = run_experiment_with_mode(&config, !serial)?;
    summary.write(&dir)?;
    println!(
        "completed {} of {} replicates; wrote {} summaries to {}",
        summary.completed,
        summary.replicates,
        summary.estimators.len(),
        dir.display()
    );
    for est in &summary.estimators {
        match (est.bandwidth_mean, est.bandwidth_sd) {
            (Some(m), Some(sd)) => println!(
                "{} rimse={} sigma={m}({sd})",
                est.spec.tag(),
                est.rimse
            ),
            _ => println!("{} rimse={}", est.spec.tag(), est.rimse),
        }
    }
    for f in &summary.failures {
        println!("failure: replicate {} seed {}: {}", f.replicate, f.seed, f.message);
    }
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
