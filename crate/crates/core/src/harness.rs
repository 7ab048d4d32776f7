//! Seeded Monte Carlo experiments: BER sweeps, convergence traces and
//! diagnostics.
//!
//! Every trial draws its channel, payload and noise from independent streams
//! derived with [`crate::seed::derive`] from `(master seed, snr_db bits, trial
//! index, purpose)`. All detectors in a trial see the same `(G, y)`. Trials run
//! in fixed-size batches on the rayon pool; after each batch the point stops
//! once every detector has at least `min_errors` bit errors or the trial budget
//! is spent, so results do not depend on the thread count.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::channel::{fmt_f64, iid_rayleigh_with, load_channel, noise_var_from_snr, transmit_with, ChannelInstance};
use crate::constellation::{make_qam, ComplexConstellation, RealAlphabet};
use crate::error::{Error, Result};
use crate::exp_family::{fim_product, min_eigenvalue, PriorNaturalParams};
use crate::iga::{compute_loo_stats, count_bit_errors, detect_traced, lyapunov_diagnostic, IgaConfig, IgaState, IgaWorkspace};
use crate::oracle::{check_enumerable, exact_map, exact_mpm, lmmse_detect, JointPosterior};
use crate::seed::{trial_rng, Purpose};
use crate::exp_family::EacsVector;

/// Trials evaluated between early-stop checks.
pub const BATCH: u64 = 64;

/// Users in the Lyapunov scaling sweep of [`run_diagnostics`].
pub const LYAPUNOV_USERS: [usize; 4] = [4, 8, 16, 32];

/// Channels drawn per user count in the Lyapunov sweep.
const LYAPUNOV_DRAWS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Iga,
    Lmmse,
    ExactMpm,
    ExactMap,
}

impl DetectorKind {
    pub fn id(self) -> &'static str {
        match self {
            DetectorKind::Iga => "iga",
            DetectorKind::Lmmse => "lmmse",
            DetectorKind::ExactMpm => "exact_mpm",
            DetectorKind::ExactMap => "exact_map",
        }
    }

    pub fn is_exact(self) -> bool {
        matches!(self, DetectorKind::ExactMpm | DetectorKind::ExactMap)
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iga" => Ok(DetectorKind::Iga),
            "lmmse" => Ok(DetectorKind::Lmmse),
            "exact_mpm" => Ok(DetectorKind::ExactMpm),
            "exact_map" => Ok(DetectorKind::ExactMap),
            other => Err(Error::Config(format!(
                "unknown detector `{other}` (expected iga, lmmse, exact_mpm or exact_map)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSource {
    /// Fresh i.i.d. Rayleigh channel per trial.
    Iid,
    /// One fixed channel loaded from a channel CSV file.
    File(PathBuf),
}

impl FromStr for ChannelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iid" => Ok(ChannelSource::Iid),
            "" => Err(Error::Config("empty channel source".into())),
            path => Ok(ChannelSource::File(PathBuf::from(path))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_rx: usize,
    pub n_users: usize,
    pub order: usize,
    pub snr_db: Vec<f64>,
    pub detectors: Vec<DetectorKind>,
    /// Maximum trials per SNR point.
    pub trials: u64,
    /// Early-stop threshold on bit errors; zero disables early stopping.
    pub min_errors: u64,
    pub seed: u64,
    pub iga: IgaConfig,
    pub channel: ChannelSource,
    /// Adds wall-time columns to the CSV output. Timing is not reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_rx: 64,
            n_users: 16,
            order: 4,
            snr_db: vec![0.0],
            detectors: vec![DetectorKind::Iga, DetectorKind::Lmmse],
            trials: 1000,
            min_errors: 500,
            seed: 0,
            iga: IgaConfig::default(),
            channel: ChannelSource::Iid,
            record_timing: false,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::Config(format!("{key}: bad value `{}`: {e}", s.trim())))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: bad value `{}`: {e}", value.trim())))
}

impl ExperimentConfig {
    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "nr" => self.n_rx = parse_one(key, value)?,
            "k" => self.n_users = parse_one(key, value)?,
            "order" => self.order = parse_one(key, value)?,
            "snr_db" => self.snr_db = parse_list(key, value)?,
            "detectors" => {
                self.detectors = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(DetectorKind::from_str)
                    .collect::<Result<_>>()?
            }
            "trials" => self.trials = parse_one(key, value)?,
            "min_errors" => self.min_errors = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "alpha" => self.iga.damping = parse_one(key, value)?,
            "max_iter" => self.iga.max_iterations = parse_one(key, value)?,
            "tol" => self.iga.convergence_tol = parse_one(key, value)?,
            "clamp" => self.iga.theta_clamp = parse_one(key, value)?,
            "channel" => self.channel = value.parse()?,
            "timing" => self.record_timing = parse_one(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        make_qam(self.order)?;
        self.iga.validate()?;
        if self.n_rx == 0 || self.n_users == 0 {
            return Err(Error::Config("nr and k must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("snr_db must list at least one SNR".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("at least one detector is required".into()));
        }
        if self.detectors.iter().any(|d| d.is_exact()) {
            let l = (self.order as f64).sqrt() as usize;
            check_enumerable(2 * self.n_users, l).map_err(|e| {
                Error::Config(format!("exact detectors need a small instance: {e}"))
            })?;
        }
        let noiseless = self.snr_db.contains(&f64::INFINITY);
        if noiseless && self.detectors.iter().any(|d| !matches!(d, DetectorKind::ExactMap)) {
            return Err(Error::Config(
                "an infinite SNR is only supported by exact_map".into(),
            ));
        }
        Ok(())
    }
}

/// A validated configuration with its channel source resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    constellation: ComplexConstellation,
    fixed_channel: Option<ChannelInstance>,
}

impl Experiment {
    pub fn new(mut cfg: ExperimentConfig) -> Result<Self> {
        let fixed_channel = match &cfg.channel {
            ChannelSource::Iid => None,
            ChannelSource::File(p) => {
                let ch = load_channel(p)?;
                cfg.n_rx = ch.n_rx();
                cfg.n_users = ch.n_users();
                Some(ch)
            }
        };
        cfg.validate()?;
        Ok(Self {
            constellation: make_qam(cfg.order)?,
            cfg,
            fixed_channel,
        })
    }

    pub fn alphabet(&self) -> &RealAlphabet {
        self.constellation.alphabet()
    }

    /// Bits carried by one trial.
    pub fn bits_per_trial(&self) -> u64 {
        (self.cfg.n_users * self.constellation.bits_per_symbol()) as u64
    }

    /// Draws the channel, payload and received signal of one trial.
    pub fn draw_trial(&self, snr_db: f64, trial: u64) -> Result<TrialInstance> {
        let seed = self.cfg.seed;
        let ch = match &self.fixed_channel {
            Some(ch) => ch.clone(),
            None => iid_rayleigh_with(
                self.cfg.n_rx,
                self.cfg.n_users,
                &mut trial_rng(seed, snr_db, trial, Purpose::Channel),
            )?,
        };
        let ch = ch.with_noise(noise_var_from_snr(snr_db, self.cfg.n_users)?);
        let l = self.alphabet().len();
        let mut bits_rng = trial_rng(seed, snr_db, trial, Purpose::Bits);
        let truth: Vec<usize> = (0..2 * self.cfg.n_users)
            .map(|_| bits_rng.random_range(0..l))
            .collect();
        let s: Vec<f64> = truth.iter().map(|&i| self.alphabet().points()[i]).collect();
        let rx = transmit_with(&ch, &s, &mut trial_rng(seed, snr_db, trial, Purpose::Noise))?;
        Ok(TrialInstance {
            channel: ch,
            y: rx.y_real,
            truth,
        })
    }

    fn run_detector(&self, kind: DetectorKind, t: &TrialInstance) -> Result<(Vec<usize>, usize)> {
        let g = t.channel.real_matrix();
        let var = t.channel.noise_var_real();
        let a = self.alphabet();
        let prior = PriorNaturalParams::uniform(g.ncols(), a.len());
        Ok(match kind {
            DetectorKind::Iga => {
                let (_, r) = detect_traced(g, &t.y, a, var, &self.cfg.iga, &prior, None)?;
                (r.decisions, r.iterations)
            }
            DetectorKind::Lmmse => (lmmse_detect(g, &t.y, var, a)?.hard, 0),
            DetectorKind::ExactMpm => (exact_mpm(g, &t.y, var, &prior, a)?, 0),
            DetectorKind::ExactMap => (exact_map(g, &t.y, var, &prior, a)?, 0),
        })
    }

    fn run_trial(&self, snr_db: f64, trial: u64) -> Result<TrialOutcome> {
        let inst = self.draw_trial(snr_db, trial)?;
        let mut out = TrialOutcome::default();
        for &kind in &self.cfg.detectors {
            let start = Instant::now();
            let (dec, iters) = self.run_detector(kind, &inst)?;
            out.elapsed.push(start.elapsed());
            out.errors.push(count_bit_errors(&dec, &inst.truth, self.alphabet()));
            out.iterations.push(iters as u64);
        }
        Ok(out)
    }
}

/// One drawn trial.
#[derive(Debug, Clone)]
pub struct TrialInstance {
    pub channel: ChannelInstance,
    pub y: Vec<f64>,
    /// Transmitted alphabet index per real component.
    pub truth: Vec<usize>,
}

/// Per-detector results of one trial, in configured detector order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialOutcome {
    pub errors: Vec<u64>,
    pub iterations: Vec<u64>,
    pub elapsed: Vec<Duration>,
}

/// Aggregated result of one detector at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct BerRecord {
    pub detector: DetectorKind,
    pub snr_db: f64,
    pub trials: u64,
    pub bit_errors: u64,
    pub bits_total: u64,
    pub ber: f64,
    pub mean_iterations: f64,
    pub mean_time: Duration,
}

/// Runs `trial_fn` in batches until `done` holds after a batch or the budget
/// is spent. Returns the per-trial results in trial order.
fn run_batched<T, F, D>(trials: u64, trial_fn: F, mut done: D) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
    D: FnMut(&[T]) -> bool,
{
    let mut results = Vec::new();
    let mut next = 0;
    while next < trials {
        let end = (next + BATCH).min(trials);
        let batch: Vec<T> = (next..end)
            .into_par_iter()
            .map(&trial_fn)
            .collect::<Result<_>>()?;
        results.extend(batch);
        next = end;
        if done(&results) {
            break;
        }
    }
    Ok(results)
}

/// Paired per-trial outcomes at one SNR, with early stopping applied.
pub fn run_point(exp: &Experiment, snr_db: f64) -> Result<Vec<TrialOutcome>> {
    let cfg = &exp.cfg;
    let mut errors = vec![0u64; cfg.detectors.len()];
    let mut seen = 0;
    run_batched(
        cfg.trials,
        |t| exp.run_trial(snr_db, t),
        |res: &[TrialOutcome]| {
            for o in &res[seen..] {
                for (e, x) in errors.iter_mut().zip(&o.errors) {
                    *e += x;
                }
            }
            seen = res.len();
            cfg.min_errors > 0 && errors.iter().all(|&e| e >= cfg.min_errors)
        },
    )
}

/// BER of every configured detector at every SNR point.
pub fn run_ber_sweep(exp: &Experiment) -> Result<Vec<BerRecord>> {
    let cfg = &exp.cfg;
    let mut records = Vec::new();
    for &snr in &cfg.snr_db {
        let outcomes = run_point(exp, snr)?;
        let n = outcomes.len() as u64;
        let bits_total = n * exp.bits_per_trial();
        for (j, &kind) in cfg.detectors.iter().enumerate() {
            let bit_errors: u64 = outcomes.iter().map(|o| o.errors[j]).sum();
            let iters: u64 = outcomes.iter().map(|o| o.iterations[j]).sum();
            let time: Duration = outcomes.iter().map(|o| o.elapsed[j]).sum();
            records.push(BerRecord {
                detector: kind,
                snr_db: snr,
                trials: n,
                bit_errors,
                bits_total,
                ber: bit_errors as f64 / bits_total as f64,
                mean_iterations: iters as f64 / n as f64,
                mean_time: time.div_f64(n as f64),
            });
        }
    }
    Ok(records)
}

/// Renders sweep records as CSV.
pub fn ber_csv(records: &[BerRecord], timing: bool) -> String {
    let mut out = String::from("detector,snr_db,trials,bit_errors,bits_total,ber,mean_iterations");
    out.push_str(if timing { ",mean_time_us\n" } else { "\n" });
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.detector,
            fmt_f64(r.snr_db),
            r.trials,
            r.bit_errors,
            r.bits_total,
            fmt_f64(r.ber),
            fmt_f64(r.mean_iterations)
        );
        if timing {
            let _ = write!(out, ",{}", fmt_f64(r.mean_time.as_secs_f64() * 1e6));
        }
        out.push('\n');
    }
    out
}

/// BER of the IGA decision after each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub trials: u64,
    pub bit_errors: u64,
    pub bits_total: u64,
    pub ber: f64,
}

/// Per-iteration BER of the IGA detector at one SNR over the same trials a
/// sweep would draw. Runs that converge early keep their final decision for
/// the remaining iterations. Early stopping uses the final-iteration errors.
pub fn run_convergence_trace(exp: &Experiment, snr_db: f64) -> Result<Vec<TraceRow>> {
    let cfg = &exp.cfg;
    if !cfg.detectors.contains(&DetectorKind::Iga) {
        return Err(Error::Config("trace requires the iga detector".into()));
    }
    let t_max = cfg.iga.max_iterations;
    let a = exp.alphabet();
    let mut final_errors = 0;
    let mut seen = 0;
    let per_trial = run_batched(
        cfg.trials,
        |t| -> Result<Vec<u64>> {
            let inst = exp.draw_trial(snr_db, t)?;
            let g = inst.channel.real_matrix();
            let prior = PriorNaturalParams::uniform(g.ncols(), a.len());
            let (_, r) = detect_traced(
                g,
                &inst.y,
                a,
                inst.channel.noise_var_real(),
                &cfg.iga,
                &prior,
                Some(&inst.truth),
            )?;
            let mut errs = r.trace.bit_errors.unwrap_or_default();
            if let Some(&last) = errs.last() {
                errs.resize(t_max, last);
            }
            Ok(errs)
        },
        |res: &[Vec<u64>]| {
            final_errors += res[seen..].iter().filter_map(|e| e.last()).sum::<u64>();
            seen = res.len();
            cfg.min_errors > 0 && final_errors >= cfg.min_errors
        },
    )?;
    let n = per_trial.len() as u64;
    let bits_total = n * exp.bits_per_trial();
    Ok((0..t_max)
        .map(|i| {
            let bit_errors: u64 = per_trial.iter().map(|e| e[i]).sum();
            TraceRow {
                iteration: i + 1,
                trials: n,
                bit_errors,
                bits_total,
                ber: bit_errors as f64 / bits_total as f64,
            }
        })
        .collect())
}

pub fn trace_csv(snr_db: f64, rows: &[TraceRow]) -> String {
    let mut out = String::from("snr_db,iteration,trials,bit_errors,bits_total,ber\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(snr_db),
            r.iteration,
            r.trials,
            r.bit_errors,
            r.bits_total,
            fmt_f64(r.ber)
        );
    }
    out
}

/// One line of the diagnostic report.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub section: &'static str,
    pub parameter: String,
    pub statistic: &'static str,
    pub value: f64,
}

/// Diagnostic report; `notices` lists the parts that were skipped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticReport {
    pub rows: Vec<DiagnosticRow>,
    pub notices: Vec<String>,
}

impl DiagnosticReport {
    fn push(&mut self, section: &'static str, parameter: String, statistic: &'static str, value: f64) {
        self.rows.push(DiagnosticRow {
            section,
            parameter,
            statistic,
            value,
        });
    }

    /// Value of the first row matching all three keys.
    pub fn get(&self, section: &str, parameter: &str, statistic: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.section == section && r.parameter == parameter && r.statistic == statistic)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,parameter,statistic,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.section, r.parameter, r.statistic, fmt_f64(r.value));
        }
        for n in &self.notices {
            let _ = writeln!(out, "notice,{},skipped,", n.replace(',', ";"));
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Lyapunov ratios over a user sweep, FIM conditioning along one IGA run, and
/// divergence from the exact posterior on oracle-size instances. Everything is
/// evaluated at the first configured SNR.
pub fn run_diagnostics(exp: &Experiment) -> Result<DiagnosticReport> {
    let cfg = &exp.cfg;
    let a = exp.alphabet();
    let l = a.len();
    let snr = cfg.snr_db[0];
    let mut report = DiagnosticReport::default();

    // Lyapunov ratios at the all-zero starting state.
    for (idx, &k) in LYAPUNOV_USERS.iter().enumerate() {
        let noise = noise_var_from_snr(snr, k)?;
        let mut ratios = Vec::new();
        for draw in 0..LYAPUNOV_DRAWS {
            let mut rng = trial_rng(cfg.seed, snr, (idx as u64) << 32 | draw, Purpose::Diagnostic);
            let ch = iid_rayleigh_with(cfg.n_rx, k, &mut rng)?;
            let g = ch.real_matrix();
            let prior = PriorNaturalParams::uniform(2 * k, l);
            let theta = vec![EacsVector::zeros(2 * k, l); g.nrows()];
            let y = vec![0.0; g.nrows()];
            let stats = compute_loo_stats(g, &y, &prior, &theta, a, noise.real)?;
            ratios.extend(lyapunov_diagnostic(&stats, g, a, noise.real.sqrt()));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let max = ratios.iter().copied().fold(0.0, f64::max);
        report.push("lyapunov", format!("k={k}"), "median", median(&mut ratios));
        report.push("lyapunov", format!("k={k}"), "mean", mean);
        report.push("lyapunov", format!("k={k}"), "max", max);
    }

    // FIM conditioning along one trajectory.
    let inst = exp.draw_trial(snr, u64::MAX)?;
    let g = inst.channel.real_matrix();
    let prior = PriorNaturalParams::uniform(g.ncols(), l);
    let mut ws = IgaWorkspace::new(g, a, inst.channel.noise_var_real())?;
    let mut state = IgaState::new(prior, g.nrows());
    for t in 1..=cfg.iga.max_iterations {
        ws.step(&mut state, &inst.y, &cfg.iga);
        let min_eig = fim_product(&state.belief())
            .iter()
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min);
        report.push("fim", format!("iteration={t}"), "min_eigenvalue", min_eig);
    }

    // Divergence from the exact posterior.
    if let Err(e) = check_enumerable(g.ncols(), l) {
        report.notices.push(format!("kl section: {e}"));
        return Ok(report);
    }
    let kl_trials = cfg.trials;
    let pairs: Vec<(f64, f64)> = (0..kl_trials)
        .into_par_iter()
        .map(|t| kl_pair(exp, snr, t))
        .collect::<Result<_>>()?;
    let improved = pairs.iter().filter(|(i, p)| i <= p).count();
    let n = pairs.len() as f64;
    report.push("kl", format!("snr_db={snr}"), "trials", n);
    report.push("kl", format!("snr_db={snr}"), "mean_kl_iga", pairs.iter().map(|p| p.0).sum::<f64>() / n);
    report.push("kl", format!("snr_db={snr}"), "mean_kl_prior", pairs.iter().map(|p| p.1).sum::<f64>() / n);
    report.push("kl", format!("snr_db={snr}"), "fraction_iga_not_worse", improved as f64 / n);
    Ok(report)
}

/// `(KL(exact || IGA belief), KL(exact || prior))` for one trial.
fn kl_pair(exp: &Experiment, snr: f64, trial: u64) -> Result<(f64, f64)> {
    let a = exp.alphabet();
    let inst = exp.draw_trial(snr, trial)?;
    let g: &DMatrix<f64> = inst.channel.real_matrix();
    let var = inst.channel.noise_var_real();
    let prior = PriorNaturalParams::uniform(g.ncols(), a.len());
    let joint = JointPosterior::from_model(g, &inst.y, var, &prior, a)?;
    let (belief, _) = detect_traced(g, &inst.y, a, var, &exp.cfg.iga, &prior, None)?;
    let uniform = crate::exp_family::MarginalBelief::uniform(g.ncols(), a.len());
    Ok((joint.kl_to_product(&belief)?, joint.kl_to_product(&uniform)?))
}
