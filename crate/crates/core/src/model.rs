//! Feed-forward network definition, deterministic inference and the binary
//! model file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "SCANN"            5 bytes magic
//! version            u32 (currently 1)
//! name               u32 length + UTF-8 bytes
//! seed               u64
//! dataset tag        u32 length + UTF-8 bytes
//! input_dim          u32
//! layer count        u32
//! per layer:
//!   rows, cols       u32, u32   (fan-out, fan-in)
//!   activation       u8         (0 relu, 1 sigmoid, 2 softmax, 3 identity)
//!   weights          rows*cols f64, row-major
//!   bias             rows f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{activate_in_place, matvec_into, ActivationKind, Matrix, Vector};

pub const MODEL_MAGIC: &[u8; 5] = b"SCANN";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_out x fan_in`.
    pub weights: Matrix,
    pub bias: Vector,
    pub activation: ActivationKind,
}

impl LayerParams {
    pub fn new(weights: Matrix, bias: Vector, activation: ActivationKind) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Length {
                what: "bias",
                expected: weights.rows(),
                actual: bias.len(),
            });
        }
        Ok(LayerParams {
            weights,
            bias,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetworkMeta {
    pub name: String,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<LayerParams>,
    pub meta: NetworkMeta,
}

/// A weight outside the sampling-eligible range `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl NetworkSpec {
    /// Checks that the layer list is nonempty and that dimensions chain.
    pub fn new(layers: Vec<LayerParams>, meta: NetworkMeta) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::ChainMismatch {
                    prev: i,
                    prev_out: pair[0].fan_out(),
                    next: i + 1,
                    next_in: pair[1].fan_in(),
                });
            }
        }
        Ok(NetworkSpec { layers, meta })
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Layer widths, input first: `[784, 400, 10]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LayerParams::fan_out))
            .collect()
    }

    pub fn max_width(&self) -> usize {
        self.dims().into_iter().max().unwrap_or(0)
    }

    /// `x_{i+1} = act(W_i x_i + b_{i+1})` through every layer.
    pub fn forward(&self, input: &[f64]) -> Result<Vector> {
        if input.len() != self.input_dim() {
            return Err(Error::Length {
                what: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.fan_out()];
            matvec_into(&layer.weights, &x, &mut z)?;
            for (v, b) in z.iter_mut().zip(layer.bias.iter()) {
                *v += b;
            }
            activate_in_place(layer.activation, &mut z);
            x = z;
        }
        Ok(Vector::from(x))
    }

    /// Every weight outside `[-1, 1]`. Biases are not constrained.
    pub fn validate_unit_interval(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (layer, params) in self.layers.iter().enumerate() {
            let cols = params.fan_in();
            for (i, &value) in params.weights.as_slice().iter().enumerate() {
                if !(-1.0..=1.0).contains(&value) {
                    out.push(Violation {
                        layer,
                        row: i / cols,
                        col: i % cols,
                        value,
                    });
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        put_str(&mut buf, &self.meta.name);
        buf.extend_from_slice(&self.meta.seed.to_le_bytes());
        put_str(&mut buf, &self.meta.dataset);
        buf.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
            buf.push(layer.activation.tag());
            for v in layer.weights.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.bias.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5, "magic")? != MODEL_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: MODEL_VERSION,
            });
        }
        let name = r.string("name")?;
        let seed = r.u64("seed")?;
        let dataset = r.string("dataset tag")?;
        let input_dim = r.u32("input dim")? as usize;
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 {
            return Err(Error::Malformed("zero layers".into()));
        }
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let rows = r.u32("layer rows")? as usize;
            let cols = r.u32("layer cols")? as usize;
            let tag = r.take(1, "activation tag")?[0];
            let activation = ActivationKind::from_tag(tag)
                .ok_or_else(|| Error::Malformed(format!("unknown activation tag {tag}")))?;
            let weights = r.f64s(
                rows.checked_mul(cols).ok_or(Error::Truncated {
                    context: "model file",
                    what: "weight block",
                })?,
                "weight block",
            )?;
            let bias = r.f64s(rows, "bias block")?;
            let weights = Matrix::from_vec(rows, cols, weights)?;
            layers.push(LayerParams::new(weights, Vector::new(bias)?, activation)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after last layer",
                bytes.len() - r.pos
            )));
        }
        let net = NetworkSpec::new(layers, NetworkMeta { name, seed, dataset })?;
        if net.input_dim() != input_dim {
            return Err(Error::Malformed(format!(
                "header input dim {input_dim} but first layer takes {}",
                net.input_dim()
            )));
        }
        Ok(net)
    }
}

pub fn deterministic_forward(net: &NetworkSpec, input: &[f64]) -> Result<Vector> {
    net.forward(input)
}

pub fn validate_unit_interval(net: &NetworkSpec) -> Vec<Violation> {
    net.validate_unit_interval()
}

pub fn save_model(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, net.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NetworkSpec::from_bytes(&bytes)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                context: "model file",
                what,
            }),
        }
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::argmax;
    use proptest::prelude::*;

    fn layer(w: Matrix, act: ActivationKind) -> LayerParams {
        let rows = w.rows();
        LayerParams::new(w, Vector::zeros(rows), act).unwrap()
    }

    fn random_net(dims: &[usize], seed: u64) -> NetworkSpec {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let w = Matrix::from_fn(pair[1], pair[0], |_, _| rng.gen_range(-1.0..=1.0));
            let b = Vector::from((0..pair[1]).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
            let act = if i + 2 == dims.len() {
                ActivationKind::Softmax
            } else {
                ActivationKind::Relu
            };
            layers.push(LayerParams::new(w, b, act).unwrap());
        }
        NetworkSpec::new(
            layers,
            NetworkMeta {
                name: "t".into(),
                seed,
                dataset: "synthetic".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_and_negated_relu() {
        let id = NetworkSpec::new(
            vec![layer(Matrix::identity(3), ActivationKind::Identity)],
            NetworkMeta::default(),
        )
        .unwrap();
        assert_eq!(&*id.forward(&[0.3, -2.0, 5.0]).unwrap(), &[0.3, -2.0, 5.0]);

        let mut neg = Matrix::identity(3);
        neg.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        let n = NetworkSpec::new(vec![layer(neg, ActivationKind::Relu)], NetworkMeta::default()).unwrap();
        assert_eq!(&*n.forward(&[1.0, 2.0, 3.0]).unwrap(), &[0.0; 3]);
        assert!(n.forward(&[1.0]).is_err());
    }

    #[test]
    fn unit_interval_violations() {
        let zero = NetworkSpec::new(
            vec![layer(Matrix::zeros(2, 3), ActivationKind::Relu)],
            NetworkMeta::default(),
        )
        .unwrap();
        assert!(zero.validate_unit_interval().is_empty());

        let mut w = Matrix::zeros(2, 3);
        w.set(1, 2, 1.5);
        let bad = NetworkSpec::new(vec![layer(w, ActivationKind::Relu)], NetworkMeta::default()).unwrap();
        assert_eq!(
            bad.validate_unit_interval(),
            vec![Violation {
                layer: 0,
                row: 1,
                col: 2,
                value: 1.5
            }]
        );
    }

    #[test]
    fn chain_mismatch_names_both_layers() {
        let err = NetworkSpec::new(
            vec![
                layer(Matrix::zeros(4, 3), ActivationKind::Relu),
                layer(Matrix::zeros(2, 5), ActivationKind::Softmax),
            ],
            NetworkMeta::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::ChainMismatch {
                prev: 0,
                prev_out: 4,
                next: 1,
                next_in: 5
            }
        ));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = random_net(&[7, 5, 3], 11);
        let bytes = net.to_bytes();
        let back = NetworkSpec::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scann");
        save_model(&net, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), net);
    }

    #[test]
    fn load_errors_are_distinct() {
        let net = random_net(&[4, 3, 2], 1);
        let bytes = net.to_bytes();

        let truncated = &bytes[..bytes.len() - 20];
        assert!(matches!(
            NetworkSpec::from_bytes(truncated),
            Err(Error::Truncated { .. })
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(NetworkSpec::from_bytes(&magic), Err(Error::BadMagic)));

        let mut version = bytes.clone();
        version[5] = 9;
        assert!(matches!(
            NetworkSpec::from_bytes(&version),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        // second layer claims fan-in 4 while the first layer emits 3
        let raw = raw_file(&[(3, 4), (2, 4)]);
        match NetworkSpec::from_bytes(&raw) {
            Err(Error::ChainMismatch { prev: 0, next: 1, .. }) => {}
            other => panic!("expected chain mismatch, got {other:?}"),
        }
        assert!(NetworkSpec::from_bytes(&raw_file(&[(3, 4), (2, 3)])).is_ok());
    }

    fn raw_file(dims: &[(u32, u32)]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        put_str(&mut b, "raw");
        b.extend_from_slice(&0u64.to_le_bytes());
        put_str(&mut b, "");
        b.extend_from_slice(&dims[0].1.to_le_bytes());
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &(rows, cols) in dims {
            b.extend_from_slice(&rows.to_le_bytes());
            b.extend_from_slice(&cols.to_le_bytes());
            b.push(0);
            for _ in 0..rows * cols + rows {
                b.extend_from_slice(&0.25f64.to_le_bytes());
            }
        }
        b
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_output_sums_to_one(seed in any::<u64>(), x in prop::collection::vec(0.0f64..1.0, 6)) {
            let net = random_net(&[6, 5, 4], seed);
            let y = net.forward(&x).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn argmax_of_softmax_matches_logits(z in prop::collection::vec(-30.0f64..30.0, 2..12)) {
            let p = crate::math::apply_activation(ActivationKind::Softmax, &z);
            prop_assert_eq!(argmax(&p), argmax(&z));
        }
    }
}
