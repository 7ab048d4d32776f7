//! Square QAM constellations with unit average power and Gray labelling.
//!
//! A square `M`-QAM constellation is the Cartesian square of an `L = sqrt(M)`
//! point PAM alphabet. All detectors work on the real-valued lifting of the
//! system, so the per-dimension [`RealAlphabet`] is the object they consume.
//! Alphabet points are stored in ascending order; index 0 is the most negative
//! point and acts as the reference class of the natural parameters.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Tolerance used when matching a value against an alphabet point.
const POINT_TOL: f64 = 1e-9;

/// Binary-reflected Gray code of `i`.
#[inline]
pub fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

/// Inverse of [`gray`].
#[inline]
pub fn gray_inverse(mut g: usize) -> usize {
    let mut i = 0;
    while g != 0 {
        i ^= g;
        g >>= 1;
    }
    i
}

/// A normalized square QAM constellation.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexConstellation {
    order: usize,
    points: Vec<Complex64>,
    bits_per_symbol: usize,
    alphabet: RealAlphabet,
}

/// The `L` real points available to each real dimension, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RealAlphabet {
    points: Vec<f64>,
}

/// Builds the unit-power Gray-mapped square QAM constellation of `order` points.
///
/// Points are ordered with the real-part index as the major index:
/// `points[i * L + j] = (a[i], a[j])` where `a` is the ascending real alphabet.
pub fn make_qam(order: usize) -> Result<ComplexConstellation> {
    let l = match order {
        4 => 2,
        16 => 4,
        64 => 8,
        _ => return Err(Error::UnsupportedOrder(order)),
    };
    // Unnormalized grid {-(L-1), ..., -1, 1, ..., L-1} per dimension.
    let grid: Vec<f64> = (0..l).map(|i| (2 * i) as f64 - (l - 1) as f64).collect();
    let energy: f64 = grid
        .iter()
        .flat_map(|re| grid.iter().map(move |im| re * re + im * im))
        .sum::<f64>()
        / order as f64;
    let scale = 1.0 / energy.sqrt();
    let alphabet = RealAlphabet {
        points: grid.iter().map(|g| g * scale).collect(),
    };
    let points = alphabet
        .points
        .iter()
        .flat_map(|&re| alphabet.points.iter().map(move |&im| Complex64::new(re, im)))
        .collect();
    Ok(ComplexConstellation {
        order,
        points,
        bits_per_symbol: order.trailing_zeros() as usize,
        alphabet,
    })
}

/// Returns the per-dimension alphabet of `c`.
pub fn real_alphabet(c: &ComplexConstellation) -> RealAlphabet {
    c.alphabet.clone()
}

impl ComplexConstellation {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn alphabet(&self) -> &RealAlphabet {
        &self.alphabet
    }

    /// Gray label of `points[i]`: the real-axis label in the high bits.
    pub fn label(&self, i: usize) -> usize {
        let l = self.alphabet.len();
        (gray(i / l) << self.alphabet.bits()) | gray(i % l)
    }
}

impl RealAlphabet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Bits carried by one real dimension.
    pub fn bits(&self) -> usize {
        self.points.len().trailing_zeros() as usize
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Distance between the extreme points.
    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }

    /// Index of the nearest point; ties go to the lower index.
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (x - p).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Index of the point equal to `x`, if any.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let i = self.nearest(x);
        ((x - self.points[i]).abs() <= POINT_TOL).then_some(i)
    }

    /// Number of differing Gray-label bits between two point indices.
    pub fn bit_distance(&self, a: usize, b: usize) -> u32 {
        (gray(a) ^ gray(b)).count_ones()
    }
}

/// Maps a bit sequence onto constellation symbols.
///
/// Each symbol consumes `bits_per_symbol` bits, most significant first; the
/// first half selects the real-axis level and the second half the imaginary
/// one, each Gray coded.
pub fn bits_to_symbols(bits: &[u8], c: &ComplexConstellation) -> Result<Vec<Complex64>> {
    let bps = c.bits_per_symbol;
    if !bits.len().is_multiple_of(bps) {
        return Err(Error::BitLength {
            len: bits.len(),
            bits_per_symbol: bps,
        });
    }
    let half = bps / 2;
    let a = &c.alphabet.points;
    Ok(bits
        .chunks(bps)
        .map(|chunk| {
            let (hi, lo) = chunk.split_at(half);
            let re = gray_inverse(pack(hi));
            let im = gray_inverse(pack(lo));
            Complex64::new(a[re], a[im])
        })
        .collect())
}

/// Inverse of [`bits_to_symbols`]; rejects symbols off the constellation.
pub fn symbols_to_bits(symbols: &[Complex64], c: &ComplexConstellation) -> Result<Vec<u8>> {
    let half = c.bits_per_symbol / 2;
    let mut bits = Vec::with_capacity(symbols.len() * c.bits_per_symbol);
    for (index, s) in symbols.iter().enumerate() {
        let off = || Error::OffConstellation {
            index,
            re: s.re,
            im: s.im,
        };
        let re = c.alphabet.index_of(s.re).ok_or_else(off)?;
        let im = c.alphabet.index_of(s.im).ok_or_else(off)?;
        unpack(gray(re), half, &mut bits);
        unpack(gray(im), half, &mut bits);
    }
    Ok(bits)
}

/// Bits of the real lifting `[Re(s); Im(s)]` given as alphabet indices.
///
/// `indices` has length `2K`: entries `0..K` are real parts and `K..2K`
/// imaginary parts of the `K` complex symbols.
pub fn real_indices_to_bits(indices: &[usize], alphabet: &RealAlphabet) -> Vec<u8> {
    let k = indices.len() / 2;
    let m = alphabet.bits();
    let mut bits = Vec::with_capacity(indices.len() * m);
    for u in 0..k {
        unpack(gray(indices[u]), m, &mut bits);
        unpack(gray(indices[u + k]), m, &mut bits);
    }
    bits
}

fn pack(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
}

fn unpack(value: usize, width: usize, out: &mut Vec<u8>) {
    for shift in (0..width).rev() {
        out.push(((value >> shift) & 1) as u8);
    }
}
