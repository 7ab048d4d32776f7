//! Information-geometry signal detection.
//!
//! The posterior of the real model is approximated by a product distribution
//! `p_0(s; theta_0)` on the objective manifold. Each observation `y_n` has an
//! auxiliary manifold point `p_n(s; theta_n)` that keeps its own interaction
//! term exactly. The m-projection of `p_n` back onto the product family only
//! needs the marginals of `p_n`, which are approximated by treating the
//! interference seen by component `k` on row `n` as Gaussian:
//!
//! ```text
//! mu~[n][k] = y_n - sum_{k' != k} g[n][k'] mu[n][k']
//! V[n][k]   = sum_{k' != k} g[n][k']^2 v[n][k'] + sigma_z^2
//! xi[n][k][l] = g (s0 - sl) (g (s0 + sl) - 2 mu~) / (2 V)
//! ```
//!
//! and the coordinates are updated with damping `alpha`:
//! `theta_n <- alpha * sum_{n' != n} xi_n' + (1 - alpha) theta_n` and
//! `theta_0 <- alpha * sum_n xi_n + (1 - alpha) theta_0`.
//!
//! Row sums are formed once per row and the leave-one-out quantities obtained
//! by subtracting the `k`-th term, so one sweep costs `O(Nr K L)`.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use crate::constellation::RealAlphabet;
use crate::error::{Error, Result};
use crate::exp_family::{
    row_moments, softmax_row, theta_to_belief, EacsVector, MarginalBelief, PriorNaturalParams,
    DEFAULT_THETA_CLAMP,
};

/// Tuning of the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgaConfig {
    /// Damping `alpha` in `(0, 1]`.
    pub damping: f64,
    /// Maximum number of sweeps. Zero returns the prior belief.
    pub max_iterations: usize,
    /// Stop once the largest change of `theta_0` falls below this.
    pub convergence_tol: f64,
    /// Bound applied to every coordinate after each sweep.
    pub theta_clamp: f64,
}

impl Default for IgaConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iterations: 30,
            convergence_tol: 1e-6,
            theta_clamp: DEFAULT_THETA_CLAMP,
        }
    }
}

impl IgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config(format!(
                "convergence tolerance must be non-negative, got {}",
                self.convergence_tol
            )));
        }
        if !(self.theta_clamp > 0.0) {
            return Err(Error::Config(format!(
                "theta clamp must be positive, got {}",
                self.theta_clamp
            )));
        }
        Ok(())
    }
}

/// Coordinates of the objective and auxiliary manifold points.
#[derive(Debug, Clone, PartialEq)]
pub struct IgaState {
    pub d: PriorNaturalParams,
    /// One coordinate vector per real observation.
    pub theta_am: Vec<EacsVector>,
    pub theta_obm: EacsVector,
    pub iteration: usize,
    pub converged: bool,
}

impl IgaState {
    /// All-zero coordinates for `n_obs` observations.
    pub fn new(d: PriorNaturalParams, n_obs: usize) -> Self {
        let zero = EacsVector::zeros(d.components(), d.levels());
        Self {
            theta_am: vec![zero.clone(); n_obs],
            theta_obm: zero,
            d,
            iteration: 0,
            converged: false,
        }
    }

    pub fn belief(&self) -> MarginalBelief {
        theta_to_belief(&self.d, &self.theta_obm).expect("state shapes are consistent")
    }
}

/// Per-iteration record of a detection run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    /// Largest absolute change of `theta_0` in each sweep.
    pub max_delta: Vec<f64>,
    /// Bit errors of the hard decision after each sweep, when ground truth
    /// was supplied.
    pub bit_errors: Option<Vec<u64>>,
    /// Wall time of each sweep. Not reproducible across runs.
    pub wall_time: Vec<Duration>,
}

/// Output of [`detect`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    /// Alphabet index per real component.
    pub decisions: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: IterationTrace,
}

/// Gaussian interference statistics for every `(n, k)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOneOutStats {
    n_obs: usize,
    n_comp: usize,
    mu: Vec<f64>,
    v: Vec<f64>,
    row_sum_gmu: Vec<f64>,
    row_sum_g2v: Vec<f64>,
    tilde_mu: Vec<f64>,
    var_y: Vec<f64>,
}

impl LeaveOneOutStats {
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    /// Mean of component `k` under `theta_n`.
    pub fn mu(&self, n: usize, k: usize) -> f64 {
        self.mu[n * self.n_comp + k]
    }

    /// Variance of component `k` under `theta_n`.
    pub fn v(&self, n: usize, k: usize) -> f64 {
        self.v[n * self.n_comp + k]
    }

    pub fn row_sum_gmu(&self, n: usize) -> f64 {
        self.row_sum_gmu[n]
    }

    pub fn row_sum_g2v(&self, n: usize) -> f64 {
        self.row_sum_g2v[n]
    }

    /// Interference-cancelled observation `mu~[n][k]`.
    pub fn tilde_mu(&self, n: usize, k: usize) -> f64 {
        self.tilde_mu[n * self.n_comp + k]
    }

    /// Variance of the interference plus noise, `V[n][k]`.
    pub fn var_y(&self, n: usize, k: usize) -> f64 {
        self.var_y[n * self.n_comp + k]
    }
}

/// Row-major copy of the real channel; rows are contiguous for the sweep.
#[derive(Debug, Clone)]
struct RowMajor {
    cols: usize,
    data: Vec<f64>,
}

impl RowMajor {
    fn new(g: &DMatrix<f64>) -> Self {
        let (rows, cols) = g.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for n in 0..rows {
            data.extend(g.row(n).iter());
        }
        Self { cols, data }
    }

    #[inline]
    fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }
}

/// Scratch for one row of statistics.
struct RowStats<'a> {
    mu: &'a mut [f64],
    v: &'a mut [f64],
    tilde_mu: &'a mut [f64],
    var_y: &'a mut [f64],
}

/// Fills the statistics of one row and returns `(sum g mu, sum g^2 v)`.
#[inline]
fn fill_row_stats(
    g_row: &[f64],
    y_n: f64,
    d: &PriorNaturalParams,
    theta_n: &EacsVector,
    points: &[f64],
    noise_var: f64,
    out: RowStats<'_>,
) -> (f64, f64) {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for (k, &g) in g_row.iter().enumerate() {
        let (m, v) = row_moments(d.row(k), theta_n.row(k), points);
        out.mu[k] = m;
        out.v[k] = v;
        s1 += g * m;
        s2 += g * g * v;
    }
    for (k, &g) in g_row.iter().enumerate() {
        out.tilde_mu[k] = y_n - s1 + g * out.mu[k];
        out.var_y[k] = (s2 - g * g * out.v[k]).max(0.0) + noise_var;
    }
    (s1, s2)
}

/// Closed-form `xi` of one row from its statistics.
#[inline]
fn fill_row_xi(g_row: &[f64], tilde_mu: &[f64], var_y: &[f64], points: &[f64], xi: &mut [f64]) {
    let w = points.len() - 1;
    let s0 = points[0];
    for (k, &g) in g_row.iter().enumerate() {
        let scale = g / (2.0 * var_y[k]);
        let tm2 = 2.0 * tilde_mu[k];
        for (x, &sl) in xi[k * w..(k + 1) * w].iter_mut().zip(&points[1..]) {
            *x = scale * (s0 - sl) * (g * (s0 + sl) - tm2);
        }
    }
}

fn check_dims(
    g: &DMatrix<f64>,
    y: &[f64],
    d: &PriorNaturalParams,
    a: &RealAlphabet,
) -> Result<()> {
    if y.len() != g.nrows() {
        return Err(Error::Dimension {
            what: "received vector length",
            expected: g.nrows(),
            got: y.len(),
        });
    }
    if d.components() != g.ncols() {
        return Err(Error::Dimension {
            what: "prior components",
            expected: g.ncols(),
            got: d.components(),
        });
    }
    if d.levels() != a.len() {
        return Err(Error::Dimension {
            what: "prior alphabet size",
            expected: a.len(),
            got: d.levels(),
        });
    }
    Ok(())
}

fn check_noise(noise_var: f64) -> Result<()> {
    if noise_var > 0.0 && noise_var.is_finite() {
        Ok(())
    } else {
        Err(Error::NoiseVariance(noise_var))
    }
}

/// Leave-one-out Gaussian statistics of every row under its own `theta_n`.
pub fn compute_loo_stats(
    g: &DMatrix<f64>,
    y: &[f64],
    d: &PriorNaturalParams,
    theta_am: &[EacsVector],
    a: &RealAlphabet,
    noise_var: f64,
) -> Result<LeaveOneOutStats> {
    check_noise(noise_var)?;
    check_dims(g, y, d, a)?;
    if theta_am.len() != g.nrows() {
        return Err(Error::Dimension {
            what: "auxiliary coordinate count",
            expected: g.nrows(),
            got: theta_am.len(),
        });
    }
    let (n_obs, n_comp) = g.shape();
    let rows = RowMajor::new(g);
    let size = n_obs * n_comp;
    let mut st = LeaveOneOutStats {
        n_obs,
        n_comp,
        mu: vec![0.0; size],
        v: vec![0.0; size],
        row_sum_gmu: vec![0.0; n_obs],
        row_sum_g2v: vec![0.0; n_obs],
        tilde_mu: vec![0.0; size],
        var_y: vec![0.0; size],
    };
    for n in 0..n_obs {
        let r = n * n_comp..(n + 1) * n_comp;
        let (s1, s2) = fill_row_stats(
            rows.row(n),
            y[n],
            d,
            &theta_am[n],
            a.points(),
            noise_var,
            RowStats {
                mu: &mut st.mu[r.clone()],
                v: &mut st.v[r.clone()],
                tilde_mu: &mut st.tilde_mu[r.clone()],
                var_y: &mut st.var_y[r],
            },
        );
        st.row_sum_gmu[n] = s1;
        st.row_sum_g2v[n] = s2;
    }
    Ok(st)
}

/// The increments `xi_n = theta_0n - theta_n` from the closed form.
pub fn compute_xi(stats: &LeaveOneOutStats, g: &DMatrix<f64>, a: &RealAlphabet) -> Vec<EacsVector> {
    let rows = RowMajor::new(g);
    let nc = stats.n_comp;
    (0..stats.n_obs)
        .map(|n| {
            let mut xi = EacsVector::zeros(nc, a.len());
            let r = n * nc..(n + 1) * nc;
            fill_row_xi(
                rows.row(n),
                &stats.tilde_mu[r.clone()],
                &stats.var_y[r],
                a.points(),
                xi.as_mut_slice(),
            );
            xi
        })
        .collect()
}

/// Gaussian approximations of the auxiliary-manifold marginals `p_{n,k}`:
/// `p_{n,k}(s^(l)) ∝ exp(d + theta_n)_l * exp(-(g s^(l) - mu~)^2 / (2 V))`.
pub fn clt_marginals(
    stats: &LeaveOneOutStats,
    g: &DMatrix<f64>,
    d: &PriorNaturalParams,
    theta_am: &[EacsVector],
    a: &RealAlphabet,
) -> Vec<MarginalBelief> {
    let l = a.len();
    let pts = a.points();
    (0..stats.n_obs)
        .map(|n| {
            let mut prob = vec![0.0; stats.n_comp * l];
            let mut expo = vec![0.0; l - 1];
            let mut shift = vec![0.0; l - 1];
            for k in 0..stats.n_comp {
                let gk = g[(n, k)];
                let (tm, var) = (stats.tilde_mu(n, k), stats.var_y(n, k));
                let q = |s: f64| -(gk * s - tm).powi(2) / (2.0 * var);
                let q0 = q(pts[0]);
                for j in 0..l - 1 {
                    expo[j] = theta_am[n].row(k)[j];
                    shift[j] = d.row(k)[j] + q(pts[j + 1]) - q0;
                }
                softmax_row(&shift, &expo, &mut prob[k * l..(k + 1) * l]);
            }
            MarginalBelief::from_vec(stats.n_comp, l, prob).expect("softmax rows are normalized")
        })
        .collect()
}

/// Lyapunov ratio `eps / sqrt(V[n][k])` for every pair, row-major.
///
/// `eps` bounds the centred summands of the interference on row `n`: the
/// larger of `max_k' |g[n][k']| * (span + max |s|)` and `2 sigma_z sqrt(2/pi)`.
/// Smaller values mean the Gaussian approximation is more trustworthy.
pub fn lyapunov_diagnostic(
    stats: &LeaveOneOutStats,
    g: &DMatrix<f64>,
    a: &RealAlphabet,
    noise_sd: f64,
) -> Vec<f64> {
    let amp = a.span() + a.min().abs().max(a.max().abs());
    let gauss = 2.0 * noise_sd * (2.0 / std::f64::consts::PI).sqrt();
    let mut out = Vec::with_capacity(stats.n_obs * stats.n_comp);
    for n in 0..stats.n_obs {
        let gmax = g.row(n).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let eps = (gmax * amp).max(gauss);
        out.extend((0..stats.n_comp).map(|k| eps / stats.var_y(n, k).sqrt()));
    }
    out
}

/// Reusable buffers for repeated sweeps on one channel.
pub struct IgaWorkspace {
    rows: RowMajor,
    points: Vec<f64>,
    noise_var: f64,
    mu: Vec<f64>,
    v: Vec<f64>,
    tilde_mu: Vec<f64>,
    var_y: Vec<f64>,
    xi: Vec<f64>,
    total: Vec<f64>,
}

impl IgaWorkspace {
    pub fn new(g: &DMatrix<f64>, a: &RealAlphabet, noise_var: f64) -> Result<Self> {
        check_noise(noise_var)?;
        let (n_obs, n_comp) = g.shape();
        let w = a.len() - 1;
        Ok(Self {
            rows: RowMajor::new(g),
            points: a.points().to_vec(),
            noise_var,
            mu: vec![0.0; n_comp],
            v: vec![0.0; n_comp],
            tilde_mu: vec![0.0; n_comp],
            var_y: vec![0.0; n_comp],
            xi: vec![0.0; n_obs * n_comp * w],
            total: vec![0.0; n_comp * w],
        })
    }

    /// One damped sweep applied in place. Returns the largest change of
    /// `theta_0`.
    pub fn step(&mut self, state: &mut IgaState, y: &[f64], cfg: &IgaConfig) -> f64 {
        let len = self.total.len();
        let alpha = cfg.damping;
        self.total.iter_mut().for_each(|t| *t = 0.0);
        for (n, theta_n) in state.theta_am.iter().enumerate() {
            let g_row = self.rows.row(n);
            fill_row_stats(
                g_row,
                y[n],
                &state.d,
                theta_n,
                &self.points,
                self.noise_var,
                RowStats {
                    mu: &mut self.mu,
                    v: &mut self.v,
                    tilde_mu: &mut self.tilde_mu,
                    var_y: &mut self.var_y,
                },
            );
            let xi = &mut self.xi[n * len..(n + 1) * len];
            fill_row_xi(g_row, &self.tilde_mu, &self.var_y, &self.points, xi);
            for (t, x) in self.total.iter_mut().zip(xi.iter()) {
                *t += x;
            }
        }
        for (n, theta_n) in state.theta_am.iter_mut().enumerate() {
            let xi = &self.xi[n * len..(n + 1) * len];
            for ((t, x), s) in theta_n.as_mut_slice().iter_mut().zip(xi).zip(&self.total) {
                *t = alpha * (s - x) + (1.0 - alpha) * *t;
            }
            theta_n.clamp(cfg.theta_clamp);
        }
        let mut max_delta = 0.0f64;
        for (t, s) in state.theta_obm.as_mut_slice().iter_mut().zip(&self.total) {
            let new = (alpha * s + (1.0 - alpha) * *t).clamp(-cfg.theta_clamp, cfg.theta_clamp);
            max_delta = max_delta.max((new - *t).abs());
            *t = new;
        }
        state.iteration += 1;
        max_delta
    }
}

/// One damped sweep: statistics, increments, and the simultaneous update of
/// all `2Nr + 1` coordinate vectors.
pub fn iga_step(
    state: &IgaState,
    g: &DMatrix<f64>,
    y: &[f64],
    a: &RealAlphabet,
    noise_var: f64,
    cfg: &IgaConfig,
) -> Result<(IgaState, f64)> {
    cfg.validate()?;
    check_dims(g, y, &state.d, a)?;
    if state.theta_am.len() != g.nrows() {
        return Err(Error::Dimension {
            what: "auxiliary coordinate count",
            expected: g.nrows(),
            got: state.theta_am.len(),
        });
    }
    let mut ws = IgaWorkspace::new(g, a, noise_var)?;
    let mut next = state.clone();
    let delta = ws.step(&mut next, y, cfg);
    Ok((next, delta))
}

/// Runs the detector from all-zero coordinates and returns the final belief
/// and the MPM decisions.
pub fn detect(
    g: &DMatrix<f64>,
    y: &[f64],
    a: &RealAlphabet,
    noise_var: f64,
    cfg: &IgaConfig,
    prior: &PriorNaturalParams,
) -> Result<(MarginalBelief, DetectionReport)> {
    detect_traced(g, y, a, noise_var, cfg, prior, None)
}

/// As [`detect`], additionally counting bit errors against `truth` (alphabet
/// indices of the transmitted real components) after every sweep.
pub fn detect_traced(
    g: &DMatrix<f64>,
    y: &[f64],
    a: &RealAlphabet,
    noise_var: f64,
    cfg: &IgaConfig,
    prior: &PriorNaturalParams,
    truth: Option<&[usize]>,
) -> Result<(MarginalBelief, DetectionReport)> {
    cfg.validate()?;
    check_dims(g, y, prior, a)?;
    if let Some(t) = truth {
        if t.len() != g.ncols() {
            return Err(Error::Dimension {
                what: "ground-truth length",
                expected: g.ncols(),
                got: t.len(),
            });
        }
    }
    let mut ws = IgaWorkspace::new(g, a, noise_var)?;
    let mut state = IgaState::new(prior.clone(), g.nrows());
    let mut trace = IterationTrace {
        bit_errors: truth.map(|_| Vec::new()),
        ..Default::default()
    };
    while state.iteration < cfg.max_iterations {
        let start = Instant::now();
        let delta = ws.step(&mut state, y, cfg);
        trace.wall_time.push(start.elapsed());
        trace.max_delta.push(delta);
        if let (Some(errs), Some(t)) = (trace.bit_errors.as_mut(), truth) {
            errs.push(count_bit_errors(&state.belief().argmax(), t, a));
        }
        if delta < cfg.convergence_tol {
            state.converged = true;
            break;
        }
    }
    let belief = state.belief();
    let report = DetectionReport {
        decisions: belief.argmax(),
        iterations: state.iteration,
        converged: state.converged,
        trace,
    };
    Ok((belief, report))
}

/// Gray-label bit errors between two index vectors.
pub fn count_bit_errors(detected: &[usize], truth: &[usize], a: &RealAlphabet) -> u64 {
    detected
        .iter()
        .zip(truth)
        .map(|(&x, &t)| u64::from(a.bit_distance(x, t)))
        .sum()
}
