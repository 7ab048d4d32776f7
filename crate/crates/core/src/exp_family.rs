//! Coordinates and calculus for product distributions over a real alphabet.
//!
//! A product distribution over `2K` components, each taking one of `L`
//! alphabet values, is written in exponential-family form with the indicator
//! statistics of levels `1..L` (level 0 is the reference class):
//!
//! ```text
//! p_k(s^(l)) = exp(d[k][l] + theta[k][l]) / (1 + sum_j exp(d[k][j] + theta[k][j]))
//! ```
//!
//! `d` holds the prior natural parameters and `theta` the e-affine
//! coordinates of the manifold point. Both are `2K x (L-1)` row-major arrays.

use nalgebra::DMatrix;

use crate::constellation::RealAlphabet;
use crate::error::{Error, Result};

/// Default bound applied to every e-affine coordinate after an update.
pub const DEFAULT_THETA_CLAMP: f64 = 40.0;

/// A `components x (levels - 1)` array of log-ratio coordinates.
///
/// This single shape serves the prior parameters `d`, the e-affine coordinates
/// `theta` and the increments `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct EacsVector {
    components: usize,
    levels: usize,
    values: Vec<f64>,
}

/// Natural parameters of the prior, `d[k][l-1] = ln(p_k(s^(l)) / p_k(s^(0)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorNaturalParams(pub EacsVector);

/// Per-component probability vectors, `components x levels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBelief {
    components: usize,
    levels: usize,
    prob: Vec<f64>,
}

impl EacsVector {
    pub fn zeros(components: usize, levels: usize) -> Self {
        assert!(levels >= 2, "an alphabet needs at least two points");
        Self {
            components,
            levels,
            values: vec![0.0; components * (levels - 1)],
        }
    }

    /// Wraps a row-major `components x (levels - 1)` buffer.
    pub fn from_vec(components: usize, levels: usize, values: Vec<f64>) -> Result<Self> {
        let want = components * levels.saturating_sub(1);
        if levels < 2 || values.len() != want {
            return Err(Error::Dimension {
                what: "coordinate array length",
                expected: want,
                got: values.len(),
            });
        }
        Ok(Self {
            components,
            levels,
            values,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Alphabet size `L` (the row length is `L - 1`).
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.levels - 1;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.levels - 1;
        &mut self.values[k * w..(k + 1) * w]
    }

    /// Clamps every entry to `[-bound, bound]`.
    pub fn clamp(&mut self, bound: f64) {
        for v in &mut self.values {
            *v = v.clamp(-bound, bound);
        }
    }

    /// Largest absolute entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.components != other.components || self.levels != other.levels {
            return Err(Error::Dimension {
                what: "coordinate array shape",
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        Ok(())
    }
}

impl PriorNaturalParams {
    /// The uniform prior, all zeros.
    pub fn uniform(components: usize, levels: usize) -> Self {
        Self(EacsVector::zeros(components, levels))
    }

    pub fn components(&self) -> usize {
        self.0.components
    }

    pub fn levels(&self) -> usize {
        self.0.levels
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.0.row(k)
    }
}

impl MarginalBelief {
    /// Wraps a row-major `components x levels` probability table.
    ///
    /// Every entry must be positive and finite and every row must sum to one
    /// within `1e-9`.
    pub fn from_vec(components: usize, levels: usize, prob: Vec<f64>) -> Result<Self> {
        if prob.len() != components * levels {
            return Err(Error::Dimension {
                what: "belief table length",
                expected: components * levels,
                got: prob.len(),
            });
        }
        let b = Self {
            components,
            levels,
            prob,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn uniform(components: usize, levels: usize) -> Self {
        Self {
            components,
            levels,
            prob: vec![1.0 / levels as f64; components * levels],
        }
    }

    fn validate(&self) -> Result<()> {
        for k in 0..self.components {
            let row = self.row(k);
            for (level, &value) in row.iter().enumerate() {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::Probability {
                        component: k,
                        level,
                        value,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Probability {
                    component: k,
                    level: self.levels,
                    value: sum,
                });
            }
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.prob
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.prob[k * self.levels..(k + 1) * self.levels]
    }

    /// Most probable level per component; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.components)
            .map(|k| {
                let row = self.row(k);
                let mut best = 0;
                for (l, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }
}

/// Natural parameters of a prior given as a `components x L` probability table.
pub fn prior_np(prior: &MarginalBelief) -> PriorNaturalParams {
    let l = prior.levels;
    let mut d = EacsVector::zeros(prior.components, l);
    for k in 0..prior.components {
        let row = prior.row(k);
        for (dst, p) in d.row_mut(k).iter_mut().zip(&row[1..]) {
            *dst = (p / row[0]).ln();
        }
    }
    PriorNaturalParams(d)
}

/// Builds [`PriorNaturalParams`] from raw probability rows, rejecting
/// non-positive entries.
pub fn prior_np_from_probs(components: usize, levels: usize, probs: Vec<f64>) -> Result<PriorNaturalParams> {
    Ok(prior_np(&MarginalBelief::from_vec(components, levels, probs)?))
}

/// Writes the probabilities of one component into `out` (length `L`).
///
/// The exponent vector is augmented with the reference class's zero and
/// shifted by its maximum before exponentiating.
#[inline]
pub(crate) fn softmax_row(d: &[f64], theta: &[f64], out: &mut [f64]) {
    let max = d
        .iter()
        .zip(theta)
        .map(|(a, b)| a + b)
        .fold(0.0f64, f64::max);
    out[0] = (-max).exp();
    let mut z = out[0];
    for ((o, a), b) in out[1..].iter_mut().zip(d).zip(theta) {
        *o = (a + b - max).exp();
        z += *o;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Mean and variance of one component under its stable softmax belief.
#[inline]
pub(crate) fn row_moments(d: &[f64], theta: &[f64], points: &[f64]) -> (f64, f64) {
    let max = d
        .iter()
        .zip(theta)
        .map(|(a, b)| a + b)
        .fold(0.0f64, f64::max);
    let w0 = (-max).exp();
    let mut z = w0;
    let mut m1 = w0 * points[0];
    let mut m2 = w0 * points[0] * points[0];
    for ((a, b), s) in d.iter().zip(theta).zip(&points[1..]) {
        let w = (a + b - max).exp();
        z += w;
        m1 += w * s;
        m2 += w * s * s;
    }
    let mu = m1 / z;
    let v = (m2 / z - mu * mu).max(0.0);
    (mu, v)
}

/// Beliefs `p_0(s; theta)` of the product distribution with prior `d`.
pub fn theta_to_belief(d: &PriorNaturalParams, theta: &EacsVector) -> Result<MarginalBelief> {
    d.0.same_shape(theta)?;
    let l = theta.levels;
    let mut prob = vec![0.0; theta.components * l];
    for (k, out) in prob.chunks_mut(l).enumerate() {
        softmax_row(d.row(k), theta.row(k), out);
    }
    Ok(MarginalBelief {
        components: theta.components,
        levels: l,
        prob,
    })
}

/// E-affine coordinates of a strictly positive belief, the left inverse of
/// [`theta_to_belief`].
pub fn belief_to_theta(d: &PriorNaturalParams, b: &MarginalBelief) -> Result<EacsVector> {
    if d.components() != b.components || d.levels() != b.levels {
        return Err(Error::Dimension {
            what: "belief shape",
            expected: d.components() * d.levels(),
            got: b.components * b.levels,
        });
    }
    let mut theta = EacsVector::zeros(b.components, b.levels);
    for k in 0..b.components {
        let row = b.row(k);
        for (level, &p) in row.iter().enumerate() {
            if !(p > 0.0) {
                return Err(Error::Probability {
                    component: k,
                    level,
                    value: p,
                });
            }
        }
        let ln0 = row[0].ln();
        for ((t, p), dk) in theta.row_mut(k).iter_mut().zip(&row[1..]).zip(d.row(k)) {
            *t = p.ln() - ln0 - dk;
        }
    }
    Ok(theta)
}

/// Per-component mean and variance of `b` over alphabet `a`.
pub fn belief_moments(b: &MarginalBelief, a: &RealAlphabet) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.levels {
        return Err(Error::Dimension {
            what: "alphabet size",
            expected: b.levels,
            got: a.len(),
        });
    }
    let pts = a.points();
    let (mut mu, mut v) = (Vec::with_capacity(b.components), Vec::with_capacity(b.components));
    for k in 0..b.components {
        let row = b.row(k);
        let m1: f64 = row.iter().zip(pts).map(|(p, s)| p * s).sum();
        let m2: f64 = row.iter().zip(pts).map(|(p, s)| p * s * s).sum();
        mu.push(m1);
        v.push((m2 - m1 * m1).max(0.0));
    }
    Ok((mu, v))
}

/// Per-component free energy `ln(1 + sum_l exp(d + theta))`.
pub fn free_energy(d: &PriorNaturalParams, theta: &EacsVector) -> Result<Vec<f64>> {
    d.0.same_shape(theta)?;
    Ok((0..theta.components)
        .map(|k| {
            let row: Vec<f64> = d.row(k).iter().zip(theta.row(k)).map(|(a, b)| a + b).collect();
            let max = row.iter().copied().fold(0.0f64, f64::max);
            max + ((-max).exp() + row.iter().map(|x| (x - max).exp()).sum::<f64>()).ln()
        })
        .collect())
}

/// Total free energy, the sum over components.
pub fn total_free_energy(d: &PriorNaturalParams, theta: &EacsVector) -> Result<f64> {
    Ok(free_energy(d, theta)?.iter().sum())
}

/// KL divergence between two product distributions, summed over components.
pub fn kl_divergence_product(p: &MarginalBelief, q: &MarginalBelief) -> Result<f64> {
    if p.components != q.components || p.levels != q.levels {
        return Err(Error::Dimension {
            what: "belief shape",
            expected: p.prob.len(),
            got: q.prob.len(),
        });
    }
    Ok(p
        .prob
        .iter()
        .zip(&q.prob)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Fisher information blocks `Diag(eta_k) - eta_k eta_k^T`, one per component,
/// where `eta_k` are the probabilities of levels `1..L`.
pub fn fim_product(b: &MarginalBelief) -> Vec<DMatrix<f64>> {
    let w = b.levels - 1;
    (0..b.components)
        .map(|k| {
            let p = b.row(k);
            let eta = &p[1..];
            // eta_i (1 - eta_i) is formed from the other masses so saturated
            // rows keep a positive diagonal.
            DMatrix::from_fn(w, w, |i, j| {
                if i == j {
                    let rest: f64 = p.iter().enumerate().filter(|&(l, _)| l != i + 1).map(|(_, q)| q).sum();
                    eta[i] * rest
                } else {
                    -eta[i] * eta[j]
                }
            })
        })
        .collect()
}

/// Smallest eigenvalue of a symmetric block.
pub fn min_eigenvalue(block: &DMatrix<f64>) -> f64 {
    if block.nrows() == 1 {
        return block[(0, 0)];
    }
    block
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
