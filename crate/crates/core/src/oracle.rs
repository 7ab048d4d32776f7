//! Exhaustive references for small instances and the LMMSE baseline.
//!
//! The exact routines enumerate all `L^(2K)` outcomes of the real model and
//! work in the log domain. Enumeration is limited to `2K log2(L) <= 24` bits.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::constellation::RealAlphabet;
use crate::error::{Error, Result};
use crate::exp_family::{belief_to_theta, EacsVector, MarginalBelief, PriorNaturalParams};

/// Largest number of outcome bits the enumerating routines accept.
pub const MAX_ENUMERATION_BITS: usize = 24;

/// Floor applied to marginals that underflow to zero.
const PROB_FLOOR: f64 = 1e-300;

/// Outcome bits needed to enumerate `n_comp` components over `levels` points.
pub fn enumeration_bits(n_comp: usize, levels: usize) -> usize {
    n_comp * levels.next_power_of_two().trailing_zeros() as usize
}

/// Fails when `n_comp` components over `levels` points exceed the guard.
pub fn check_enumerable(n_comp: usize, levels: usize) -> Result<()> {
    let bits = enumeration_bits(n_comp, levels);
    if bits > MAX_ENUMERATION_BITS {
        return Err(Error::TooLarge {
            bits,
            limit: MAX_ENUMERATION_BITS,
        });
    }
    Ok(())
}

/// An unnormalized log-weight table over every outcome.
///
/// Outcome `i` has component digits in big-endian order: component 0 is the
/// most significant digit, so ascending index is lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosterior {
    n_comp: usize,
    levels: usize,
    log_weights: Vec<f64>,
}

impl JointPosterior {
    /// Log posterior `sum_k ln p_k(s_k) - |y - G s|^2 / (2 sigma_z^2)` up to a
    /// constant, with the prior given by its natural parameters.
    pub fn from_model(
        g: &DMatrix<f64>,
        y: &[f64],
        noise_var: f64,
        prior: &PriorNaturalParams,
        a: &RealAlphabet,
    ) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::NoiseVariance(noise_var));
        }
        check_model(g, y, prior, a)?;
        let inv = 1.0 / (2.0 * noise_var);
        let log_weights = enumerate(g, a, |digits, gs| {
            let prior_term: f64 = digits
                .iter()
                .enumerate()
                .map(|(k, &l)| if l == 0 { 0.0 } else { prior.row(k)[l - 1] })
                .sum();
            prior_term - inv * residual_sq(y, gs)
        })?;
        Ok(Self {
            n_comp: g.ncols(),
            levels: a.len(),
            log_weights,
        })
    }

    /// Wraps an arbitrary table of `levels^n_comp` log weights.
    pub fn from_log_weights(n_comp: usize, levels: usize, log_weights: Vec<f64>) -> Result<Self> {
        check_enumerable(n_comp, levels)?;
        let want = levels.pow(n_comp as u32);
        if log_weights.len() != want {
            return Err(Error::Dimension {
                what: "joint table length",
                expected: want,
                got: log_weights.len(),
            });
        }
        Ok(Self {
            n_comp,
            levels,
            log_weights,
        })
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Component digits of outcome `index`.
    pub fn digits(&self, index: usize) -> Vec<usize> {
        digits_of(index, self.n_comp, self.levels)
    }

    /// Log of the normalizing constant.
    pub fn log_normalizer(&self) -> f64 {
        let max = self.max_log_weight();
        let mut w: Vec<f64> = self.log_weights.iter().map(|x| (x - max).exp()).collect();
        w.sort_by(f64::total_cmp);
        max + w.iter().sum::<f64>().ln()
    }

    fn max_log_weight(&self) -> f64 {
        self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact marginals of every component.
    pub fn marginals(&self) -> MarginalBelief {
        let mut entries: Vec<(f64, u32)> = self
            .log_weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, i as u32))
            .collect();
        accumulate_marginals(&mut entries, self.n_comp, self.levels)
    }

    /// Index of the most probable outcome; ties go to the lexicographically
    /// smallest one.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.log_weights.iter().enumerate() {
            if w > self.log_weights[best] {
                best = i;
            }
        }
        best
    }

    /// `KL(p || q)` between this joint and a product distribution.
    pub fn kl_to_product(&self, q: &MarginalBelief) -> Result<f64> {
        if q.components() != self.n_comp || q.levels() != self.levels {
            return Err(Error::Dimension {
                what: "belief shape",
                expected: self.n_comp * self.levels,
                got: q.components() * q.levels(),
            });
        }
        let ln_z = self.log_normalizer();
        let ln_q: Vec<f64> = q.as_slice().iter().map(|p| p.ln()).collect();
        let mut terms = Vec::with_capacity(self.log_weights.len());
        for (i, &w) in self.log_weights.iter().enumerate() {
            let ln_p = w - ln_z;
            let p = ln_p.exp();
            if p == 0.0 {
                continue;
            }
            let ln_prod: f64 = digits_of(i, self.n_comp, self.levels)
                .iter()
                .enumerate()
                .map(|(k, &l)| ln_q[k * self.levels + l])
                .sum();
            terms.push(p * (ln_p - ln_prod));
        }
        terms.sort_by(f64::total_cmp);
        Ok(terms.iter().sum::<f64>().max(0.0))
    }
}

/// Sums weights per `(component, level)` after sorting the entries by
/// `(log weight, outcome)`, so the result does not depend on the order in
/// which the outcomes were produced.
pub fn accumulate_marginals(entries: &mut [(f64, u32)], n_comp: usize, levels: usize) -> MarginalBelief {
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let max = entries.last().map_or(0.0, |e| e.0);
    let mut acc = vec![0.0; n_comp * levels];
    for &(w, i) in entries.iter() {
        let e = (w - max).exp();
        let mut rest = i as usize;
        for k in (0..n_comp).rev() {
            acc[k * levels + rest % levels] += e;
            rest /= levels;
        }
    }
    for row in acc.chunks_mut(levels) {
        let z: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p = (*p / z).max(PROB_FLOOR);
        }
    }
    MarginalBelief::from_vec(n_comp, levels, acc).expect("normalized rows")
}

/// Exact posterior marginals by enumeration.
pub fn exact_marginals(
    g: &DMatrix<f64>,
    y: &[f64],
    noise_var: f64,
    prior: &PriorNaturalParams,
    a: &RealAlphabet,
) -> Result<MarginalBelief> {
    Ok(JointPosterior::from_model(g, y, noise_var, prior, a)?.marginals())
}

/// Coordinates of the m-projection of `joint` onto the product family with
/// prior `prior`: the coordinates whose marginals equal the joint's.
pub fn exact_m_projection(joint: &JointPosterior, prior: &PriorNaturalParams) -> Result<EacsVector> {
    belief_to_theta(prior, &joint.marginals())
}

/// Jointly most probable outcome as alphabet indices.
///
/// With zero noise the prior is ignored and the outcome closest to `y`
/// is returned.
pub fn exact_map(
    g: &DMatrix<f64>,
    y: &[f64],
    noise_var: f64,
    prior: &PriorNaturalParams,
    a: &RealAlphabet,
) -> Result<Vec<usize>> {
    if noise_var == 0.0 {
        check_model(g, y, prior, a)?;
        let neg = enumerate(g, a, |_, gs| -residual_sq(y, gs))?;
        let joint = JointPosterior::from_log_weights(g.ncols(), a.len(), neg)?;
        return Ok(joint.digits(joint.argmax()));
    }
    let joint = JointPosterior::from_model(g, y, noise_var, prior, a)?;
    Ok(joint.digits(joint.argmax()))
}

/// Componentwise argmax of the exact marginals.
pub fn exact_mpm(
    g: &DMatrix<f64>,
    y: &[f64],
    noise_var: f64,
    prior: &PriorNaturalParams,
    a: &RealAlphabet,
) -> Result<Vec<usize>> {
    Ok(exact_marginals(g, y, noise_var, prior, a)?.argmax())
}

/// Soft and hard LMMSE estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmseOutput {
    pub soft: Vec<f64>,
    /// Nearest alphabet index per component, ties to the lower index.
    pub hard: Vec<usize>,
}

/// `s = (G^T G + sigma_z^2 I)^-1 G^T y` by Cholesky factorization, followed by
/// componentwise nearest-point decisions.
pub fn lmmse_detect(
    g: &DMatrix<f64>,
    y: &[f64],
    noise_var: f64,
    a: &RealAlphabet,
) -> Result<LmmseOutput> {
    if y.len() != g.nrows() {
        return Err(Error::Dimension {
            what: "received vector length",
            expected: g.nrows(),
            got: y.len(),
        });
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::NoiseVariance(noise_var));
    }
    let mut gram = g.tr_mul(g);
    for i in 0..gram.nrows() {
        gram[(i, i)] += noise_var;
    }
    let rhs = g.tr_mul(&DVector::from_column_slice(y));
    // Pivots below the rounding level of the largest diagonal mean the matrix
    // is singular to working precision.
    let floor = gram.nrows() as f64 * f64::EPSILON * gram.diagonal().max();
    let chol = Cholesky::new(gram).ok_or(Error::NotPositiveDefinite)?;
    if chol.l_dirty().diagonal().iter().any(|d| d * d <= floor) {
        return Err(Error::NotPositiveDefinite);
    }
    let soft = chol.solve(&rhs);
    if soft.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let hard = soft.iter().map(|&x| a.nearest(x)).collect();
    Ok(LmmseOutput {
        soft: soft.as_slice().to_vec(),
        hard,
    })
}

fn check_model(
    g: &DMatrix<f64>,
    y: &[f64],
    prior: &PriorNaturalParams,
    a: &RealAlphabet,
) -> Result<()> {
    if y.len() != g.nrows() {
        return Err(Error::Dimension {
            what: "received vector length",
            expected: g.nrows(),
            got: y.len(),
        });
    }
    if prior.components() != g.ncols() || prior.levels() != a.len() {
        return Err(Error::Dimension {
            what: "prior shape",
            expected: g.ncols() * a.len(),
            got: prior.components() * prior.levels(),
        });
    }
    check_enumerable(g.ncols(), a.len())
}

fn digits_of(mut index: usize, n_comp: usize, levels: usize) -> Vec<usize> {
    let mut d = vec![0; n_comp];
    for k in (0..n_comp).rev() {
        d[k] = index % levels;
        index /= levels;
    }
    d
}

#[inline]
fn residual_sq(y: &[f64], gs: &[f64]) -> f64 {
    y.iter().zip(gs).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Evaluates `f(digits, G s)` for every outcome in index order.
///
/// `G s` is accumulated column by column in a fixed order through prefix
/// sums, so each outcome's value is bitwise independent of the traversal.
fn enumerate<F>(g: &DMatrix<f64>, a: &RealAlphabet, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize], &[f64]) -> f64,
{
    let (rows, n_comp) = g.shape();
    let levels = a.len();
    check_enumerable(n_comp, levels)?;
    let pts = a.points();
    let total = levels.pow(n_comp as u32);
    // prefix[k] holds sum_{j < k} g_j s_j; prefix[0] is zero.
    let mut prefix = vec![vec![0.0; rows]; n_comp + 1];
    let mut digits = vec![0usize; n_comp];
    let refresh = |prefix: &mut Vec<Vec<f64>>, digits: &[usize], from: usize| {
        for k in from..n_comp {
            let s = pts[digits[k]];
            let (head, tail) = prefix.split_at_mut(k + 1);
            for ((out, prev), gv) in tail[0].iter_mut().zip(&head[k]).zip(g.column(k).iter()) {
                *out = prev + gv * s;
            }
        }
    };
    refresh(&mut prefix, &digits, 0);
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(f(&digits, &prefix[n_comp]));
        // Odometer increment, least significant digit last.
        let mut k = n_comp;
        while k > 0 {
            k -= 1;
            digits[k] += 1;
            if digits[k] < levels {
                break;
            }
            digits[k] = 0;
        }
        refresh(&mut prefix, &digits, k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::{make_qam, real_alphabet};
    use crate::exp_family::{prior_np_from_probs, theta_to_belief};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qpsk() -> RealAlphabet {
        real_alphabet(&make_qam(4).unwrap())
    }

    fn random_g(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn guard_rejects_large_instances() {
        let a = real_alphabet(&make_qam(16).unwrap());
        let g = DMatrix::zeros(2, 14);
        let prior = PriorNaturalParams::uniform(14, 4);
        assert!(matches!(
            exact_marginals(&g, &[0.0, 0.0], 1.0, &prior, &a),
            Err(Error::TooLarge { bits: 28, limit: 24 })
        ));
        assert!(check_enumerable(24, 2).is_ok());
        assert!(check_enumerable(25, 2).is_err());
    }

    #[test]
    fn diagonal_channel_factorizes() {
        // Two independent scalar channels y_k = h_k s_k + z_k.
        let a = qpsk();
        let h = [0.8, -1.3];
        let g = DMatrix::from_diagonal(&DVector::from_row_slice(&h));
        let y = [0.4, 0.2];
        let var = 0.5;
        let prior = prior_np_from_probs(2, 2, vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        let pri = [[0.3, 0.7], [0.5, 0.5]];
        let m = exact_marginals(&g, &y, var, &prior, &a).unwrap();
        for k in 0..2 {
            let w: Vec<f64> = (0..2)
                .map(|l| pri[k][l] * (-(y[k] - h[k] * a.points()[l]).powi(2) / (2.0 * var)).exp())
                .collect();
            let z = w[0] + w[1];
            for l in 0..2 {
                assert!((m.row(k)[l] - w[l] / z).abs() < 1e-14);
            }
        }
        assert_eq!(
            exact_map(&g, &y, var, &prior, &a).unwrap(),
            exact_mpm(&g, &y, var, &prior, &a).unwrap()
        );
    }

    #[test]
    fn huge_noise_returns_prior() {
        let a = qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_g(&mut rng, 3, 4);
        let probs = vec![0.2, 0.8, 0.6, 0.4, 0.5, 0.5, 0.9, 0.1];
        let prior = prior_np_from_probs(4, 2, probs.clone()).unwrap();
        let m = exact_marginals(&g, &[0.5, -0.2, 1.0], 1e12, &prior, &a).unwrap();
        for (p, q) in m.as_slice().iter().zip(&probs) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn marginals_are_order_invariant() {
        let a = qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_g(&mut rng, 4, 4);
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let joint = JointPosterior::from_model(&g, &y, 0.3, &PriorNaturalParams::uniform(4, 2), &a).unwrap();
        let m = joint.marginals();
        for k in 0..4 {
            assert!((m.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut entries: Vec<(f64, u32)> =
            joint.log_weights().iter().enumerate().map(|(i, &w)| (w, i as u32)).collect();
        entries.shuffle(&mut rng);
        assert_eq!(accumulate_marginals(&mut entries, 4, 2), m);
        entries.reverse();
        assert_eq!(accumulate_marginals(&mut entries, 4, 2), m);
    }

    #[test]
    fn log_weights_do_not_depend_on_traversal() {
        // Direct per-outcome evaluation in column order gives the same bits.
        let a = real_alphabet(&make_qam(16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_g(&mut rng, 3, 3);
        let y = [0.1, 0.2, -0.3];
        let joint = JointPosterior::from_model(&g, &y, 0.2, &PriorNaturalParams::uniform(3, 4), &a).unwrap();
        for i in [0usize, 5, 17, 63] {
            let d = joint.digits(i);
            let mut gs = vec![0.0; 3];
            for k in 0..3 {
                for r in 0..3 {
                    gs[r] += g[(r, k)] * a.points()[d[k]];
                }
            }
            let w = 0.0 - (1.0 / 0.4) * residual_sq(&y, &gs);
            assert_eq!(joint.log_weights()[i], w);
        }
    }

    #[test]
    fn projection_of_product_is_itself() {
        // A product joint built from known coordinates projects back onto them.
        let d = prior_np_from_probs(3, 2, vec![0.4, 0.6, 0.5, 0.5, 0.7, 0.3]).unwrap();
        let theta = EacsVector::from_vec(3, 2, vec![0.3, -1.1, 2.0]).unwrap();
        let b = theta_to_belief(&d, &theta).unwrap();
        let w: Vec<f64> = (0..8)
            .map(|i| {
                let digits = digits_of(i, 3, 2);
                digits.iter().enumerate().map(|(k, &l)| b.row(k)[l].ln()).sum()
            })
            .collect();
        let joint = JointPosterior::from_log_weights(3, 2, w).unwrap();
        let proj = exact_m_projection(&joint, &d).unwrap();
        assert!(proj.max_abs_diff(&theta) < 1e-12);
        assert!(joint.kl_to_product(&b).unwrap() < 1e-14);
    }

    #[test]
    fn noiseless_map_recovers_truth() {
        let a = qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_g(&mut rng, 6, 4);
        let truth = [1usize, 0, 0, 1];
        let s: Vec<f64> = truth.iter().map(|&i| a.points()[i]).collect();
        let y = (&g * DVector::from_vec(s)).as_slice().to_vec();
        let prior = PriorNaturalParams::uniform(4, 2);
        assert_eq!(exact_map(&g, &y, 0.0, &prior, &a).unwrap(), truth);
        assert_eq!(exact_map(&g, &y, 1e-6, &prior, &a).unwrap(), truth);
        assert!(exact_marginals(&g, &y, 0.0, &prior, &a).is_err());
    }

    #[test]
    fn map_with_orthogonal_columns_is_quantized_matched_filter() {
        let a = real_alphabet(&make_qam(16).unwrap());
        // Orthogonal columns with distinct norms.
        let q = nalgebra::linalg::QR::new(DMatrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * j as f64)).q();
        let scale = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 2.0, 0.5]));
        let g = q * scale;
        let y = [0.3, -0.8, 0.1, 0.5, -0.2];
        let gty = g.tr_mul(&DVector::from_row_slice(&y));
        let want: Vec<usize> = (0..3)
            .map(|k| a.nearest(gty[k] / g.column(k).norm_squared()))
            .collect();
        let got = exact_map(&g, &y, 0.1, &PriorNaturalParams::uniform(3, 4), &a).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn map_dominates_every_outcome() {
        let a = qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_g(&mut rng, 4, 4);
        let joint = JointPosterior::from_model(&g, &[0.2, 0.1, -0.4, 0.3], 0.2, &PriorNaturalParams::uniform(4, 2), &a).unwrap();
        let best = joint.log_weights()[joint.argmax()];
        assert!(joint.log_weights().iter().all(|&w| w <= best));
    }

    #[test]
    fn mpm_choice_has_at_least_uniform_mass() {
        let a = real_alphabet(&make_qam(16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_g(&mut rng, 4, 4);
        let prior = PriorNaturalParams::uniform(4, 4);
        let y = [0.3, -0.3, 0.9, 0.0];
        let m = exact_marginals(&g, &y, 0.3, &prior, &a).unwrap();
        let mpm = exact_mpm(&g, &y, 0.3, &prior, &a).unwrap();
        for (k, &l) in mpm.iter().enumerate() {
            assert!(m.row(k)[l] >= 0.25);
        }
    }

    #[test]
    fn lmmse_examples() {
        let a = qpsk();
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let out = lmmse_detect(&g, &[1.0, 2.0], 1.0, &a).unwrap();
        assert!((out.soft[0] - 0.5).abs() < 1e-15);
        assert!((out.soft[1] - 0.8).abs() < 1e-15);
        assert_eq!(out.hard, vec![1, 1]);

        let eye = DMatrix::identity(3, 3);
        let y = [0.3, -0.2, 0.9];
        let out = lmmse_detect(&eye, &y, 1e-12, &a).unwrap();
        for (s, t) in out.soft.iter().zip(y) {
            assert!((s - t).abs() < 1e-10);
        }
        assert_eq!(out.hard, vec![1, 0, 1]);

        let out = lmmse_detect(&eye, &y, 1e12, &a).unwrap();
        assert!(out.soft.iter().all(|s| s.abs() < 1e-11));

        let rank1 = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(
            lmmse_detect(&rank1, &[1.0, 1.0], 0.0, &a),
            Err(Error::NotPositiveDefinite)
        );
    }

    #[test]
    fn lmmse_minimizes_regularized_objective() {
        let a = qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_g(&mut rng, 6, 4);
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var = 0.4;
        let out = lmmse_detect(&g, &y, var, &a).unwrap();
        let obj = |s: &[f64]| {
            let gs = &g * DVector::from_row_slice(s);
            residual_sq(&y, gs.as_slice()) + var * s.iter().map(|x| x * x).sum::<f64>()
        };
        let base = obj(&out.soft);
        for _ in 0..200 {
            let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            for sign in [1e-3, -1e-3] {
                let s: Vec<f64> = out.soft.iter().zip(&dir).map(|(a, d)| a + sign * d / n).collect();
                assert!(obj(&s) >= base);
            }
        }
    }
}
