//! Channel instances, the real-valued lifting and received-signal synthesis.
//!
//! The complex model `y~ = G~ s~ + z~` is rewritten as `y = G s + z` with
//! `y = [Re y~; Im y~]`, `s = [Re s~; Im s~]` and
//! `G = [[Re G~, -Im G~], [Im G~, Re G~]]`. The real noise has variance
//! `sigma_z^2 = sigma~_z^2 / 2` per component.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A channel realization together with its noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInstance {
    complex: DMatrix<Complex64>,
    real: DMatrix<f64>,
    noise: NoiseVariance,
}

/// Complex and per-real-component noise variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseVariance {
    pub complex: f64,
    pub real: f64,
}

impl NoiseVariance {
    pub fn from_complex(complex: f64) -> Self {
        Self {
            complex,
            real: complex / 2.0,
        }
    }

    /// True for the noiseless limit, which only the exact oracles accept.
    pub fn is_noiseless(&self) -> bool {
        self.real == 0.0
    }
}

/// Received signal of the real model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSignal {
    pub y_real: Vec<f64>,
    pub true_symbols_real: Option<Vec<f64>>,
}

/// Lifts an `Nr x K` complex matrix to the `2Nr x 2K` real block matrix.
pub fn lift_to_real(g: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (nr, k) = g.shape();
    DMatrix::from_fn(2 * nr, 2 * k, |i, j| {
        let z = g[(i % nr, j % k)];
        match (i < nr, j < k) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// Stacks a complex vector as `[Re; Im]`.
pub fn stack(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)).collect()
}

/// Inverse of [`stack`].
pub fn unstack(v: &[f64]) -> Vec<Complex64> {
    let k = v.len() / 2;
    (0..k).map(|i| Complex64::new(v[i], v[i + k])).collect()
}

/// Noise variances for the convention `SNR = K / sigma~_z^2`.
///
/// An infinite SNR maps to zero noise, which only the exact oracles accept.
pub fn noise_var_from_snr(snr_db: f64, n_users: usize) -> Result<NoiseVariance> {
    if n_users == 0 {
        return Err(Error::Config("n_users must be at least 1".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(NoiseVariance::from_complex(0.0));
    }
    Ok(NoiseVariance::from_complex(
        n_users as f64 / 10f64.powf(snr_db / 10.0),
    ))
}

/// Draws an i.i.d. Rayleigh channel with unit per-entry variance.
pub fn generate_iid_rayleigh(n_rx: usize, n_users: usize, seed: u64) -> Result<ChannelInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    iid_rayleigh_with(n_rx, n_users, &mut rng)
}

/// As [`generate_iid_rayleigh`] but drawing from a caller-supplied RNG.
pub fn iid_rayleigh_with<R: Rng>(
    n_rx: usize,
    n_users: usize,
    rng: &mut R,
) -> Result<ChannelInstance> {
    if n_rx == 0 || n_users == 0 {
        return Err(Error::Config(format!(
            "channel dimensions must be positive, got {n_rx}x{n_users}"
        )));
    }
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    // Column-major fill keeps the stream order fixed.
    let g = DMatrix::from_fn(n_rx, n_users, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * scale, im * scale)
    });
    Ok(ChannelInstance::new(g))
}

impl ChannelInstance {
    /// Wraps a complex matrix; the noise level starts at zero.
    pub fn new(complex: DMatrix<Complex64>) -> Self {
        let real = lift_to_real(&complex);
        Self {
            complex,
            real,
            noise: NoiseVariance::from_complex(0.0),
        }
    }

    pub fn with_noise(mut self, noise: NoiseVariance) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_snr_db(self, snr_db: f64) -> Result<Self> {
        let noise = noise_var_from_snr(snr_db, self.n_users())?;
        Ok(self.with_noise(noise))
    }

    pub fn n_rx(&self) -> usize {
        self.complex.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.complex.ncols()
    }

    pub fn complex_matrix(&self) -> &DMatrix<Complex64> {
        &self.complex
    }

    pub fn real_matrix(&self) -> &DMatrix<f64> {
        &self.real
    }

    pub fn noise(&self) -> NoiseVariance {
        self.noise
    }

    pub fn noise_var_real(&self) -> f64 {
        self.noise.real
    }
}

/// Computes `y = G s + z` with i.i.d. `N(0, sigma_z^2)` noise drawn from `seed`.
pub fn transmit(ch: &ChannelInstance, s_real: &[f64], seed: u64) -> Result<ReceivedSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    transmit_with(ch, s_real, &mut rng)
}

/// As [`transmit`] but drawing noise from a caller-supplied RNG.
pub fn transmit_with<R: Rng>(
    ch: &ChannelInstance,
    s_real: &[f64],
    rng: &mut R,
) -> Result<ReceivedSignal> {
    let g = &ch.real;
    if s_real.len() != g.ncols() {
        return Err(Error::Dimension {
            what: "transmitted vector length",
            expected: g.ncols(),
            got: s_real.len(),
        });
    }
    let sigma = ch.noise.real.sqrt();
    let y_real = (0..g.nrows())
        .map(|n| {
            let clean: f64 = (0..g.ncols()).map(|k| g[(n, k)] * s_real[k]).sum();
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                clean + sigma * z
            } else {
                clean
            }
        })
        .collect();
    Ok(ReceivedSignal {
        y_real,
        true_symbols_real: Some(s_real.to_vec()),
    })
}

/// Formats a float with 17 significant digits.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes a complex matrix: a header line `nr,k`, then `nr*k` lines
/// `re,im` in row-major order.
pub fn channel_to_csv(g: &DMatrix<Complex64>) -> String {
    let mut out = format!("{},{}\n", g.nrows(), g.ncols());
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let z = g[(i, j)];
            let _ = writeln!(out, "{},{}", fmt_f64(z.re), fmt_f64(z.im));
        }
    }
    out
}

/// Writes `ch` in the channel CSV format.
pub fn save_channel(ch: &ChannelInstance, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, channel_to_csv(&ch.complex))?;
    Ok(())
}

/// Loads a channel CSV file.
pub fn load_channel(path: impl AsRef<Path>) -> Result<ChannelInstance> {
    parse_channel_csv(&std::fs::read_to_string(path)?)
}

/// Parses the channel CSV format; errors carry 1-based line numbers.
pub fn parse_channel_csv(text: &str) -> Result<ChannelInstance> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header `nr,k`".into(),
    })?;
    let (nr, k) = parse_pair::<usize>(header, hline + 1)?;
    if nr == 0 || k == 0 {
        return Err(Error::Parse {
            line: hline + 1,
            msg: format!("dimensions must be positive, got {nr},{k}"),
        });
    }
    let entries = parse_complex_rows(lines, nr * k, hline + 2)?;
    Ok(ChannelInstance::new(DMatrix::from_row_slice(nr, k, &entries)))
}

/// Serializes a complex vector: a header line `n`, then `n` lines `re,im`.
pub fn signal_to_csv(y: &[Complex64]) -> String {
    let mut out = format!("{}\n", y.len());
    for z in y {
        let _ = writeln!(out, "{},{}", fmt_f64(z.re), fmt_f64(z.im));
    }
    out
}

/// Parses the received-signal CSV format written by [`signal_to_csv`].
pub fn parse_signal_csv(text: &str) -> Result<Vec<Complex64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header `n`".into(),
    })?;
    let n: usize = header.trim().parse().map_err(|e| Error::Parse {
        line: hline + 1,
        msg: format!("bad length `{}`: {e}", header.trim()),
    })?;
    parse_complex_rows(lines, n, hline + 2)
}

fn parse_complex_rows<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    expected: usize,
    next_line: usize,
) -> Result<Vec<Complex64>> {
    let mut out = Vec::with_capacity(expected);
    for (i, line) in lines {
        if out.len() == expected {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("unexpected extra row; expected {expected} rows"),
            });
        }
        let (re, im) = parse_pair::<f64>(line, i + 1)?;
        out.push(Complex64::new(re, im));
    }
    if out.len() != expected {
        return Err(Error::Parse {
            line: next_line + out.len(),
            msg: format!("expected {expected} rows `re,im`, found {}", out.len()),
        });
    }
    Ok(out)
}

fn parse_pair<T: std::str::FromStr>(line: &str, line_no: usize) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    let mut fields = line.split(',').map(str::trim);
    let mut next = |name: &str| -> Result<T> {
        let f = fields.next().filter(|f| !f.is_empty()).ok_or(Error::Parse {
            line: line_no,
            msg: format!("row truncated: missing {name} in `{line}`"),
        })?;
        f.parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad {name} `{f}`: {e}"),
        })
    };
    let a = next("first field")?;
    let b = next("second field")?;
    if fields.next().is_some() {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("too many fields in `{line}`"),
        });
    }
    Ok((a, b))
}
