//! Bit-packed binary matrices and the signed binary matvec.

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Row-major bit matrix, 64 columns per word. Padding bits past `cols` in
/// the last word of each row are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitMatrix {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        self.words[r * self.words_per_row + c / 64] >> (c % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let w = &mut self.words[r * self.words_per_row + c / 64];
        let m = 1u64 << (c % 64);
        if on {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// True when no coordinate is set in both matrices.
    pub fn is_disjoint(&self, other: &BitMatrix) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & b == 0)
    }

    /// The `0/1` matrix as dense floats.
    pub fn to_dense(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| if self.get(r, c) { 1.0 } else { 0.0 })
    }
}

/// `result[b] = sum_{a: pos set} x[a] - sum_{a: neg set} x[a]`, accumulated in
/// ascending column order with one accumulator, which makes it bit-identical
/// to a dense matvec with the `+1/-1/0` matrix `pos - neg`.
pub fn packed_matvec(pos: &BitMatrix, neg: &BitMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if pos.rows != neg.rows || pos.cols != neg.cols {
        return Err(Error::Config(format!(
            "positive plane is {}x{} but negative plane is {}x{}",
            pos.rows, pos.cols, neg.rows, neg.cols
        )));
    }
    if x.len() != pos.cols {
        return Err(Error::MatVecShape {
            op: "packed_matvec",
            rows: pos.rows,
            cols: pos.cols,
            len: x.len(),
        });
    }
    let mut out = vec![0.0; pos.rows];
    for (b, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, (&p, &n)) in pos.row_words(b).iter().zip(neg.row_words(b)).enumerate() {
            let mut union = p | n;
            while union != 0 {
                let bit = union.trailing_zeros() as usize;
                let v = x[w * 64 + bit];
                if p >> bit & 1 == 1 {
                    acc += v;
                } else {
                    acc -= v;
                }
                union &= union - 1;
            }
        }
        *o = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::matvec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_planes(rows: usize, cols: usize, rng: &mut impl Rng) -> (BitMatrix, BitMatrix) {
        let mut pos = BitMatrix::zeros(rows, cols);
        let mut neg = BitMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                match rng.gen_range(0..3) {
                    0 => pos.set(r, c, true),
                    1 => neg.set(r, c, true),
                    _ => {}
                }
            }
        }
        (pos, neg)
    }

    fn signed_dense(pos: &BitMatrix, neg: &BitMatrix) -> Matrix {
        Matrix::from_fn(pos.rows(), pos.cols(), |r, c| {
            if pos.get(r, c) {
                1.0
            } else if neg.get(r, c) {
                -1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn zero_and_identity_planes() {
        let x = [0.5, -2.0, 3.25];
        let z = BitMatrix::zeros(4, 3);
        assert_eq!(packed_matvec(&z, &z, &x).unwrap(), vec![0.0; 4]);
        let mut eye = BitMatrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, true);
        }
        assert_eq!(packed_matvec(&eye, &BitMatrix::zeros(3, 3), &x).unwrap(), x.to_vec());
    }

    #[test]
    fn padding_stays_clear() {
        let mut m = BitMatrix::zeros(2, 70);
        m.set(1, 69, true);
        m.set(1, 69, false);
        m.set(0, 3, true);
        assert_eq!(m.count_ones(), 1);
        assert_eq!(m.row_words(0).len(), 2);
    }

    #[test]
    fn shape_errors() {
        let a = BitMatrix::zeros(2, 3);
        assert!(packed_matvec(&a, &BitMatrix::zeros(2, 4), &[0.0; 3]).is_err());
        assert!(packed_matvec(&a, &a, &[0.0; 4]).is_err());
    }

    #[test]
    fn random_64x64_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (pos, neg) = random_planes(64, 64, &mut rng);
        assert!(pos.is_disjoint(&neg));
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dense = matvec(&signed_dense(&pos, &neg), &x).unwrap();
        let packed = packed_matvec(&pos, &neg, &x).unwrap();
        assert_eq!(
            packed.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            dense.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
