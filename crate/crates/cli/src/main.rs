use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use limbfit::synth::BodyConfig;
use limbfit::Error;
use limbfit_cli::gen::read_augmentation;
use limbfit_cli::gradcheck::run_gradcheck;
use limbfit_cli::{
    cmd_eval, cmd_fit, cmd_gen, cmd_perturb, CliError, CliResult, EvalOptions, FitOptions, FlowSource, GenOptions,
    GradcheckOptions, InitMode, PerturbOptions, SegSource, WeightsPreset, EXIT_VALIDATION, GRADCHECK_TOLERANCE,
};

/// Label-free articulated skeleton fitting on synthetic LiDAR pedestrians.
///
/// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
/// LIMBFIT_THREADS caps the number of worker threads.
#[derive(Parser)]
#[command(name = "limbfit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of ray-cast pedestrian sequences.
    ///
    /// Bodies stand 6 to 17 m from a 64-beam sensor (elevation -15 to +3 deg,
    /// 2650 azimuth steps, 75 m range, 1.8 m mounting height). Frames keep at
    /// most 1024 points.
    Gen {
        /// Number of sequences.
        #[arg(long, default_value_t = 1000)]
        sequences: usize,
        /// Frames per sequence, at least 2.
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML augmentation config. Without it frames are un-augmented.
        #[arg(long)]
        augment_config: Option<PathBuf>,
        /// TOML capsule body config. Defaults to the bundled 13-joint body.
        #[arg(long)]
        body_config: Option<PathBuf>,
    },
    /// Fit skeleton poses to every sequence of a dataset.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Loss weights: stage2 = flow 0.02, p2l 0.01, sym 0.5, j2p 2, seg 0.5, kernel bandwidth 0.1;
        /// supp-demo = flow 0.2, p2l 0.1, sym 5.
        #[arg(long, value_enum, default_value_t = WeightsPreset::Stage2)]
        weights: WeightsPreset,
        /// Adam iterations.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Adam learning rate (betas 0.9 and 0.999, epsilon 1e-8).
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = SegSource::Gt)]
        seg: SegSource,
        #[arg(long, value_enum, default_value_t = FlowSource::Gt)]
        flow: FlowSource,
        /// Pose initialisation.
        #[arg(long, value_enum, default_value_t = InitMode::Perturb)]
        init: InitMode,
        /// Keypoint noise for --init perturb, meters.
        #[arg(long, default_value_t = 0.06)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame MPJPE of predicted against ground-truth pose files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Hungarian-match predictions to visible ground-truth joints first.
        #[arg(long)]
        matched: bool,
    },
    /// Perturbation-recovery experiment: noisy ground-truth keypoints are refit with
    /// weights flow 0.2, p2l 0.1, sym 5 and Adam.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        /// Keypoint noise standard deviation, meters.
        #[arg(long, default_value_t = 0.06)]
        sigma: f64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Compare analytic gradients with central differences (step 1e-5) on random
    /// instances; fails when any relative error exceeds 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        configs: usize,
        /// Points per frame.
        #[arg(long, default_value_t = 256)]
        points: usize,
    },
}

fn read_body(path: &std::path::Path) -> limbfit::Result<BodyConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { sequences, frames, seed, out, augment_config, body_config } => {
            let mut opts = GenOptions::new(out);
            opts.sequences = sequences;
            opts.frames = frames;
            opts.seed = seed;
            if let Some(p) = augment_config {
                opts.augmentation = read_augmentation(&p)?;
            }
            if let Some(p) = body_config {
                opts.body = read_body(&p)?;
            }
            let m = cmd_gen(&opts)?;
            println!(
                "wrote {} sequences of {} frames to {}",
                m.sequence_count,
                m.frames_per_sequence,
                opts.out.display()
            );
        }
        Command::Fit { input, weights, iters, lr, seg, flow, init, sigma, seed, out } => {
            let opts = FitOptions { input, out, weights, iters, lr, seg, flow, init, sigma, seed };
            let summary = cmd_fit(&opts)?;
            println!("sequence,initial_total,final_total,best_iteration");
            for s in &summary.sequences {
                let first = s.trace.first().map_or(f64::NAN, |b| b.total);
                let best = s.trace[s.best_iteration].total;
                println!("{},{first:.8e},{best:.8e},{}", s.index, s.best_iteration);
            }
        }
        Command::Eval { pred, gt, matched } => {
            print!("{}", cmd_eval(&EvalOptions { pred, gt, matched })?.to_csv());
        }
        Command::Perturb { input, sigma, trials, seed, iters, lr } => {
            let opts = PerturbOptions { input, sigma, trials, seed, iters, lr };
            print!("{}", cmd_perturb(&opts)?.to_csv());
        }
        Command::Gradcheck { seed, configs, points } => {
            let table = run_gradcheck(&GradcheckOptions { seed, configs, points })?;
            print!("{}", table.to_csv());
            let worst = table.worst();
            if worst > GRADCHECK_TOLERANCE {
                return Err(CliError::GradCheck { worst, tolerance: GRADCHECK_TOLERANCE });
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("LIMBFIT_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("LIMBFIT_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err("LIMBFIT_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
