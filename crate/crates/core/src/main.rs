use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use igasd::channel::{generate_iid_rayleigh, load_channel, noise_var_from_snr, parse_signal_csv, save_channel, stack, NoiseVariance};
use igasd::constellation::{make_qam, real_indices_to_bits};
use igasd::exp_family::PriorNaturalParams;
use igasd::harness::{
    ber_csv, run_ber_sweep, run_convergence_trace, run_diagnostics, trace_csv, DetectorKind, Experiment,
    ExperimentConfig,
};
use igasd::iga::detect;
use igasd::oracle::{exact_map, exact_mpm, lmmse_detect};

#[derive(Parser)]
#[command(name = "igasd", version, about = "Information-geometry MIMO detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// BER of each detector over an SNR list.
    Sweep(RunArgs),
    /// Per-iteration BER of the IGA detector at one SNR.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        /// SNR of the trace; defaults to the first configured SNR.
        #[arg(long)]
        at_snr_db: Option<f64>,
    },
    /// Lyapunov, FIM and divergence diagnostics.
    Diagnose(RunArgs),
    /// Detects one received vector and prints the decisions.
    DetectOne(DetectArgs),
    /// Writes an i.i.d. Rayleigh channel as CSV.
    GenChannel(GenArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Directory for CSV output.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// File name suffix; defaults to the Unix time in seconds.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nr: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    /// Comma-separated SNR list in dB.
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<String>,
    /// Comma-separated subset of iga, lmmse, exact_mpm, exact_map.
    #[arg(long)]
    detectors: Option<String>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    min_errors: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    clamp: Option<f64>,
    /// `iid` or a channel CSV path.
    #[arg(long)]
    channel: Option<String>,
    /// Adds wall-time columns to sweep output.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    channel: PathBuf,
    #[arg(long)]
    signal: PathBuf,
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long, allow_hyphen_values = true, conflicts_with = "noise_var", required_unless_present = "noise_var")]
    snr_db: Option<f64>,
    /// Complex noise variance per receive antenna.
    #[arg(long)]
    noise_var: Option<f64>,
    #[arg(long, default_value = "iga")]
    detector: String,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 30)]
    max_iter: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    nr: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    seed: u64,
    /// Output path; defaults to `gen-channel_<tag>.csv` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    dest: OutputArgs,
}

impl RunArgs {
    fn experiment(&self, seed_required: bool) -> anyhow::Result<Experiment> {
        let mut cfg = ExperimentConfig::default();
        let mut seed_given = false;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            seed_given = text
                .lines()
                .any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("seed"));
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        let flags: [(&str, Option<String>); 13] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("nr", self.nr.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("order", self.order.map(|v| v.to_string())),
            ("snr_db", self.snr_db.clone()),
            ("detectors", self.detectors.clone()),
            ("trials", self.trials.map(|v| v.to_string())),
            ("min_errors", self.min_errors.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("max_iter", self.max_iter.map(|v| v.to_string())),
            ("tol", self.tol.map(|v| v.to_string())),
            ("clamp", self.clamp.map(|v| v.to_string())),
            ("channel", self.channel.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.record_timing |= self.timing;
        if seed_required && !(seed_given || self.seed.is_some()) {
            bail!("--seed is required (or `seed=` in the config file)");
        }
        Ok(Experiment::new(cfg)?)
    }
}

fn output_path(out: &OutputArgs, command: &str) -> anyhow::Result<PathBuf> {
    let suffix = match &out.tag {
        Some(t) => t.clone(),
        None => SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs().to_string(),
    };
    fs::create_dir_all(&out.out_dir).with_context(|| format!("creating {}", out.out_dir.display()))?;
    Ok(out.out_dir.join(format!("{command}_{suffix}.csv")))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn detect_one(args: &DetectArgs) -> anyhow::Result<()> {
    let ch = load_channel(&args.channel)?;
    let text = fs::read_to_string(&args.signal).with_context(|| format!("reading {}", args.signal.display()))?;
    let y_complex = parse_signal_csv(&text)?;
    if y_complex.len() != ch.n_rx() {
        bail!("signal has {} entries but the channel has {} receive antennas", y_complex.len(), ch.n_rx());
    }
    let noise = match (args.snr_db, args.noise_var) {
        (Some(snr), _) => noise_var_from_snr(snr, ch.n_users())?,
        (None, Some(v)) if v.is_finite() && v >= 0.0 => NoiseVariance::from_complex(v),
        (None, Some(v)) => bail!("noise variance must be finite and non-negative, got {v}"),
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let ch = ch.with_noise(noise);
    let c = make_qam(args.order)?;
    let a = c.alphabet();
    let g = ch.real_matrix();
    let y = stack(&y_complex);
    let var = ch.noise_var_real();
    let prior = PriorNaturalParams::uniform(g.ncols(), a.len());
    let decisions = match args.detector.parse::<DetectorKind>()? {
        DetectorKind::Iga => {
            let cfg = igasd::iga::IgaConfig {
                damping: args.alpha,
                max_iterations: args.max_iter,
                ..Default::default()
            };
            detect(g, &y, a, var, &cfg, &prior)?.1.decisions
        }
        DetectorKind::Lmmse => lmmse_detect(g, &y, var, a)?.hard,
        DetectorKind::ExactMpm => exact_mpm(g, &y, var, &prior, a)?,
        DetectorKind::ExactMap => exact_map(g, &y, var, &prior, a)?,
    };
    let k = ch.n_users();
    let bits = real_indices_to_bits(&decisions, a);
    let bps = c.bits_per_symbol();
    println!("user,re,im,bits");
    for u in 0..k {
        let b: String = bits[u * bps..(u + 1) * bps].iter().map(|&x| if x == 1 { '1' } else { '0' }).collect();
        println!("{},{},{},{}", u, a.points()[decisions[u]], a.points()[decisions[u + k]], b);
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Sweep(run) => {
            let exp = run.experiment(true)?;
            let records = run_ber_sweep(&exp)?;
            write(&output_path(&run.out, "sweep")?, &ber_csv(&records, exp.cfg.record_timing))
        }
        Command::Trace { run, at_snr_db } => {
            let exp = run.experiment(true)?;
            let snr = at_snr_db.unwrap_or(exp.cfg.snr_db[0]);
            let rows = run_convergence_trace(&exp, snr)?;
            write(&output_path(&run.out, "trace")?, &trace_csv(snr, &rows))
        }
        Command::Diagnose(run) => {
            let exp = run.experiment(false)?;
            let report = run_diagnostics(&exp)?;
            for n in &report.notices {
                eprintln!("notice: skipped {n}");
            }
            write(&output_path(&run.out, "diagnose")?, &report.to_csv())
        }
        Command::DetectOne(args) => detect_one(args),
        Command::GenChannel(args) => {
            let ch = generate_iid_rayleigh(args.nr, args.k, args.seed)?;
            let path = match &args.out {
                Some(p) => p.clone(),
                None => output_path(&args.dest, "gen-channel")?,
            };
            save_channel(&ch, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
