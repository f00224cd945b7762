//! Dense linear algebra, activations and the cross-entropy loss.
//!
//! All sums run over ascending indices with a single accumulator, so results
//! are bit-reproducible and serve as the reference for the packed kernels.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                what: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// A dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    /// Checked constructor; rejects NaN and infinities.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Vector(data))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

impl ActivationKind {
    pub fn tag(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Sigmoid => 1,
            ActivationKind::Softmax => 2,
            ActivationKind::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ActivationKind::Relu,
            1 => ActivationKind::Sigmoid,
            2 => ActivationKind::Softmax,
            3 => ActivationKind::Identity,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softmax => "softmax",
            ActivationKind::Identity => "identity",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "softmax" => Ok(ActivationKind::Softmax),
            "identity" | "linear" => Ok(ActivationKind::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// `w · x` with ascending-index accumulation per row.
pub fn matvec(w: &Matrix, x: &[f64]) -> Result<Vector> {
    let mut out = vec![0.0; w.rows];
    matvec_into(w, x, &mut out)?;
    Ok(Vector(out))
}

pub fn matvec_into(w: &Matrix, x: &[f64], out: &mut [f64]) -> Result<()> {
    if w.cols != x.len() || out.len() != w.rows {
        return Err(Error::MatVecShape {
            op: "matvec",
            rows: w.rows,
            cols: w.cols,
            len: x.len(),
        });
    }
    for (b, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (wv, xv) in w.row(b).iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
    Ok(())
}

pub fn apply_activation(kind: ActivationKind, z: &[f64]) -> Vector {
    let mut out = z.to_vec();
    activate_in_place(kind, &mut out);
    Vector(out)
}

pub fn activate_in_place(kind: ActivationKind, z: &mut [f64]) {
    match kind {
        ActivationKind::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        ActivationKind::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
        ActivationKind::Softmax => softmax_in_place(z),
        ActivationKind::Identity => {}
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax_in_place(z: &mut [f64]) {
    if z.is_empty() {
        return;
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `-ln(max(probs[target], PROB_FLOOR))`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = *probs.get(target).ok_or(Error::ClassIndex {
        index: target,
        n_classes: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(w: &Matrix, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for b in 0..w.rows() {
            let mut s = 0.0f64;
            for a in 0..w.cols() {
                s = s + w.as_slice()[b * w.cols() + a] * x[a];
            }
            out.push(s);
        }
        out
    }

    #[test]
    fn matvec_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(&*matvec(&Matrix::identity(3), &x).unwrap(), &x);
        assert_eq!(&*matvec(&Matrix::zeros(4, 3), &x).unwrap(), &[0.0; 4]);
        let w = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let y = matvec(&w, &[2.0, 4.0]).unwrap();
        assert_eq!(&*y, &naive(&w, &[2.0, 4.0])[..]);
        assert_eq!(&*y, &[-2.0, 3.0]);
    }

    #[test]
    fn matvec_reports_both_shapes() {
        let err = matvec(&Matrix::zeros(2, 3), &[1.0; 4]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 4"), "{msg}");
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(
            &*apply_activation(ActivationKind::Relu, &[-1.0, 0.0, 2.0]),
            &[0.0, 0.0, 2.0]
        );
        assert_eq!(&*apply_activation(ActivationKind::Softmax, &[0.0, 0.0]), &[0.5, 0.5]);
        assert_eq!(&*apply_activation(ActivationKind::Sigmoid, &[0.0]), &[0.5]);
        assert_eq!(&*apply_activation(ActivationKind::Identity, &[-3.0]), &[-3.0]);
        // large logits must not overflow
        let s = apply_activation(ActivationKind::Softmax, &[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut onehot = vec![0.0; 10];
        onehot[0] = 1.0;
        assert!(cross_entropy(&onehot, 0).unwrap() <= 1e-7);
        let uniform = vec![0.1; 10];
        assert!((cross_entropy(&uniform, 7).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // clamped, not infinite
        assert!((cross_entropy(&onehot, 3).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(Error::ClassIndex { index: 2, n_classes: 2 })
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    fn mat_and_vec() -> impl Strategy<Value = (Matrix, Vec<f64>)> {
        (1usize..=64, 1usize..=64).prop_flat_map(|(r, c)| {
            (
                prop::collection::vec(-10.0f64..10.0, r * c),
                prop::collection::vec(-10.0f64..10.0, c),
            )
                .prop_map(move |(d, x)| (Matrix::from_vec(r, c, d).unwrap(), x))
        })
    }

    proptest! {
        #[test]
        fn matvec_matches_scalar_loop((w, x) in mat_and_vec()) {
            let y = matvec(&w, &x).unwrap();
            prop_assert_eq!(&*y, &naive(&w, &x)[..]);
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let s = apply_activation(ActivationKind::Softmax, &z);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let t = apply_activation(ActivationKind::Softmax, &shifted);
            for (a, b) in s.iter().zip(t.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn relu_sigmoid_monotone(a in -30.0f64..30.0, d in 0.0f64..30.0) {
            for kind in [ActivationKind::Relu, ActivationKind::Sigmoid] {
                let lo = apply_activation(kind, &[a]);
                let hi = apply_activation(kind, &[a + d]);
                prop_assert!(lo[0] <= hi[0]);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(
            z in prop::collection::vec(-20.0f64..20.0, 2..12),
            t in 0usize..12,
        ) {
            let p = apply_activation(ActivationKind::Softmax, &z);
            let t = t % p.len();
            prop_assert!(cross_entropy(&p, t).unwrap() >= 0.0);
        }
    }
}
