//! Synaptic sampling: Bernoulli weights, binary masks and sampled inference.
//!
//! A trained network with weights in `[-1, 1]` is split into two disjoint
//! probability matrices, `pos = max(w, 0)` and `neg = max(-w, 0)`. Each Monte
//! Carlo sample flips one coin per nonzero probability and runs the network
//! with the binary matrix `pos_bits - neg_bits`; biases stay deterministic.
//!
//! A coin with probability `p` is realized as `u < round(p * 2^32)` for a
//! 32-bit variate `u` that is a hash of the coin's address (see [`stream`]).
//! [`draw_sample`] materializes whole masks; [`Sampler`] evaluates the same
//! coins lazily, touching only coordinates whose input is nonzero, and
//! produces bit-identical activations.

pub mod bits;
pub mod stream;

use crate::analytics::{VoteDistribution, VoteTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{activate_in_place, argmax, ActivationKind, Matrix, Vector};
use crate::model::NetworkSpec;

pub use bits::{packed_matvec, BitMatrix};
pub use stream::{coin_variate, derive_seed, MaskMode, SampleId, SamplerSeedPlan};

const TWO_POW_32: f64 = 4_294_967_296.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliLayer {
    pub pos_prob: Matrix,
    pub neg_prob: Matrix,
    pub bias: Vector,
    pub activation: ActivationKind,
}

impl BernoulliLayer {
    pub fn fan_in(&self) -> usize {
        self.pos_prob.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.pos_prob.rows()
    }

    /// `pos_prob - neg_prob`.
    pub fn reconstruct(&self) -> Matrix {
        let data = self
            .pos_prob
            .as_slice()
            .iter()
            .zip(self.neg_prob.as_slice())
            .map(|(p, n)| p - n)
            .collect();
        Matrix::from_vec(self.pos_prob.rows(), self.pos_prob.cols(), data).expect("probabilities are finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliWeightModel {
    layers: Vec<BernoulliLayer>,
    precision_bits: Option<u32>,
}

impl BernoulliWeightModel {
    pub fn layers(&self) -> &[BernoulliLayer] {
        &self.layers
    }

    pub fn precision_bits(&self) -> Option<u32> {
        self.precision_bits
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }
}

/// Splits every weight into a positive and a negative coin probability.
pub fn split_weights(net: &NetworkSpec) -> Result<BernoulliWeightModel> {
    if let Some(v) = net.validate_unit_interval().first() {
        return Err(Error::WeightOutOfRange {
            layer: v.layer,
            row: v.row,
            col: v.col,
            value: v.value,
        });
    }
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let (rows, cols) = (l.fan_out(), l.fan_in());
            let w = l.weights.as_slice();
            let pos = w.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            let neg = w.iter().map(|&v| if v < 0.0 { -v } else { 0.0 }).collect();
            BernoulliLayer {
                pos_prob: Matrix::from_vec(rows, cols, pos).expect("finite"),
                neg_prob: Matrix::from_vec(rows, cols, neg).expect("finite"),
                bias: l.bias.clone(),
                activation: l.activation,
            }
        })
        .collect();
    Ok(BernoulliWeightModel {
        layers,
        precision_bits: None,
    })
}

/// Nearest multiple of `2^-bits`, ties rounded up.
pub fn quantize_probability(p: f64, bits: u32) -> f64 {
    let scale = (1u64 << bits) as f64;
    let x = p * scale;
    let f = x.floor();
    let q = if x - f >= 0.5 { f + 1.0 } else { f };
    q / scale
}

/// Rounds every coin probability to a `2^-bits` grid (both 0 and 1 included).
pub fn quantize_probabilities(model: &BernoulliWeightModel, bits: u32) -> Result<BernoulliWeightModel> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Config(format!("precision bits must be in 1..=16, got {bits}")));
    }
    let q = |m: &Matrix| {
        let data = m.as_slice().iter().map(|&p| quantize_probability(p, bits)).collect();
        Matrix::from_vec(m.rows(), m.cols(), data).expect("finite")
    };
    Ok(BernoulliWeightModel {
        layers: model
            .layers
            .iter()
            .map(|l| BernoulliLayer {
                pos_prob: q(&l.pos_prob),
                neg_prob: q(&l.neg_prob),
                bias: l.bias.clone(),
                activation: l.activation,
            })
            .collect(),
        precision_bits: Some(bits),
    })
}

/// Integer threshold `t` with `P(u < t) = t / 2^32` for a 32-bit variate `u`.
/// Exact for any probability on a grid of at most 32 bits.
#[inline]
pub fn coin_threshold(p: f64) -> u64 {
    (p * TWO_POW_32).round() as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledLayer {
    pub pos_bits: BitMatrix,
    pub neg_bits: BitMatrix,
}

/// One complete draw of binary weights for every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledMask {
    pub layers: Vec<SampledLayer>,
    pub sample: SampleId,
}

impl SampledMask {
    pub fn is_disjoint(&self) -> bool {
        self.layers.iter().all(|l| l.pos_bits.is_disjoint(&l.neg_bits))
    }
}

pub fn draw_sample(model: &BernoulliWeightModel, plan: &SamplerSeedPlan, id: SampleId) -> SampledMask {
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let key = plan.layer_key(id, l);
            let (rows, cols) = (layer.fan_out(), layer.fan_in());
            let mut pos_bits = BitMatrix::zeros(rows, cols);
            let mut neg_bits = BitMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let n = (r * cols + c) as u64;
                    let p = layer.pos_prob.get(r, c);
                    let q = layer.neg_prob.get(r, c);
                    if p > 0.0 && coin_variate(key, n) < coin_threshold(p) {
                        pos_bits.set(r, c, true);
                    } else if q > 0.0 && coin_variate(key, n) < coin_threshold(q) {
                        neg_bits.set(r, c, true);
                    }
                }
            }
            SampledLayer { pos_bits, neg_bits }
        })
        .collect();
    SampledMask { layers, sample: id }
}

/// Runs the network with one sampled binary mask.
pub fn sampled_forward(model: &BernoulliWeightModel, mask: &SampledMask, input: &[f64]) -> Result<Vector> {
    if mask.layers.len() != model.layers.len() {
        return Err(Error::Length {
            what: "mask layers",
            expected: model.layers.len(),
            actual: mask.layers.len(),
        });
    }
    let mut x = input.to_vec();
    for (layer, bits) in model.layers.iter().zip(&mask.layers) {
        let mut z = packed_matvec(&bits.pos_bits, &bits.neg_bits, &x)?;
        for (v, b) in z.iter_mut().zip(layer.bias.iter()) {
            *v += b;
        }
        activate_in_place(layer.activation, &mut z);
        x = z;
    }
    Ok(Vector::from(x))
}

/// Signed coin thresholds for one layer: `+t` for a positive coin, `-t` for
/// a negative one, 0 when the weight is exactly zero.
#[derive(Debug, Clone)]
struct CoinLayer {
    fan_in: usize,
    fan_out: usize,
    coins: Vec<i64>,
    bias: Vec<f64>,
    activation: ActivationKind,
}

/// Samples evaluated side by side in the first-layer kernel. Each lane keeps
/// its own accumulator and adds coins in ascending column order.
const LANES: usize = 16;

/// Samples per pass over the first layer's rows.
const SUPER_BLOCK: usize = 256;

/// Prepared sampler for bulk Monte Carlo inference.
#[derive(Debug, Clone)]
pub struct Sampler {
    layers: Vec<CoinLayer>,
    plan: SamplerSeedPlan,
}

#[derive(Default)]
struct Scratch {
    active: Vec<usize>,
    g_offset: Vec<u64>,
    g_thresh: Vec<u64>,
    g_value: Vec<f64>,
    keys: Vec<u64>,
    column: Vec<f64>,
    pre: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Sampler {
    pub fn new(model: &BernoulliWeightModel, plan: SamplerSeedPlan) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| CoinLayer {
                fan_in: l.fan_in(),
                fan_out: l.fan_out(),
                coins: l
                    .pos_prob
                    .as_slice()
                    .iter()
                    .zip(l.neg_prob.as_slice())
                    .map(|(&p, &q)| coin_threshold(p) as i64 - coin_threshold(q) as i64)
                    .collect(),
                bias: l.bias.to_vec(),
                activation: l.activation,
            })
            .collect();
        Sampler { layers, plan }
    }

    pub fn plan(&self) -> &SamplerSeedPlan {
        &self.plan
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Final activations of samples `k_start..k_start + out.len()/n_out` for
    /// one item, written row by row into `out`.
    pub fn sample_outputs(&self, item: u64, input: &[f64], k_start: u64, out: &mut [f64]) -> Result<()> {
        let n_out = self.n_classes();
        self.check_input(input)?;
        let mut scratch = Scratch::default();
        self.item_pass(item, input, k_start, out.len() / n_out, &mut scratch, |j, y| {
            out[j * n_out..(j + 1) * n_out].copy_from_slice(y);
        });
        Ok(())
    }

    /// Class votes (argmax of the final activations) of samples `0..votes.len()`.
    pub fn item_votes(&self, item: u64, input: &[f64], votes: &mut [u16]) -> Result<()> {
        self.check_input(input)?;
        let mut scratch = Scratch::default();
        self.item_votes_with(item, input, votes, &mut scratch);
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Length {
                what: "sampler input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    fn item_votes_with(&self, item: u64, input: &[f64], votes: &mut [u16], scratch: &mut Scratch) {
        self.item_pass(item, input, 0, votes.len(), scratch, |j, y| {
            votes[j] = argmax(y) as u16;
        });
    }

    /// Evaluates samples `k0..k0 + count` of one item and hands each
    /// sample's final activations to `emit`.
    ///
    /// The first layer dominates the cost. For each of its rows the coins
    /// with a nonzero input and a nonzero probability are gathered once and
    /// then flipped for a whole block of samples.
    fn item_pass(
        &self,
        item: u64,
        input: &[f64],
        k0: u64,
        count: usize,
        s: &mut Scratch,
        mut emit: impl FnMut(usize, &[f64]),
    ) {
        let first = &self.layers[0];
        s.active.clear();
        s.active.extend((0..first.fan_in).filter(|&a| input[a] != 0.0));

        let mut done = 0;
        while done < count {
            let n = SUPER_BLOCK.min(count - done);
            let padded = n.div_ceil(LANES) * LANES;
            s.keys.clear();
            s.keys.extend((0..padded).map(|j| {
                let id = self.plan.sample_id(item, k0 + (done + j) as u64);
                self.plan.layer_key(id, 0)
            }));
            s.column.clear();
            s.column.resize(padded, 0.0);
            s.pre.clear();
            s.pre.resize(n * first.fan_out, 0.0);

            for row in 0..first.fan_out {
                let coins = &first.coins[row * first.fan_in..(row + 1) * first.fan_in];
                s.g_offset.clear();
                s.g_thresh.clear();
                s.g_value.clear();
                for &a in &s.active {
                    let c = coins[a];
                    if c != 0 {
                        s.g_offset.push(counter_offset((row * first.fan_in + a) as u64));
                        s.g_thresh.push(c.unsigned_abs());
                        s.g_value.push(if c > 0 { input[a] } else { -input[a] });
                    }
                }
                lane_kernel(&s.keys, &s.g_offset, &s.g_thresh, &s.g_value, &mut s.column);
                for j in 0..n {
                    s.pre[j * first.fan_out + row] = s.column[j] + first.bias[row];
                }
            }

            for j in 0..n {
                let mut x = std::mem::take(&mut s.a);
                x.clear();
                x.extend_from_slice(&s.pre[j * first.fan_out..(j + 1) * first.fan_out]);
                activate_in_place(first.activation, &mut x);
                let id = self.plan.sample_id(item, k0 + (done + j) as u64);
                for (l, layer) in self.layers.iter().enumerate().skip(1) {
                    let key = self.plan.layer_key(id, l);
                    let mut y = std::mem::take(&mut s.b);
                    y.clear();
                    y.resize(layer.fan_out, 0.0);
                    sampled_layer(layer, key, &x, &mut y);
                    s.b = x;
                    x = y;
                }
                emit(done + j, &x);
                s.a = x;
            }
            done += n;
        }
    }

    /// Votes for every item of `data`, `k` samples each. Items are processed
    /// in parallel when the `parallel` feature is on; the table does not
    /// depend on the schedule.
    pub fn run_dataset(&self, data: &Dataset, k: usize) -> Result<VoteTable> {
        self.check_input(data.image(0))?;
        let mut votes = vec![0u16; data.len() * k];
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            votes
                .par_chunks_mut(k.max(1))
                .enumerate()
                .for_each_init(Scratch::default, |scratch, (i, row)| {
                    self.item_votes_with(i as u64, data.image(i), row, scratch)
                });
        }
        #[cfg(not(feature = "parallel"))]
        self.fill_sequential(data, k, &mut votes);
        Ok(VoteTable::new(data.len(), k, self.n_classes(), votes))
    }

    /// Single-threaded [`Sampler::run_dataset`].
    pub fn run_dataset_sequential(&self, data: &Dataset, k: usize) -> Result<VoteTable> {
        self.check_input(data.image(0))?;
        let mut votes = vec![0u16; data.len() * k];
        self.fill_sequential(data, k, &mut votes);
        Ok(VoteTable::new(data.len(), k, self.n_classes(), votes))
    }

    fn fill_sequential(&self, data: &Dataset, k: usize, votes: &mut [u16]) {
        let mut scratch = Scratch::default();
        for (i, row) in votes.chunks_mut(k.max(1)).enumerate() {
            self.item_votes_with(i as u64, data.image(i), row, &mut scratch);
        }
    }
}

/// Pre-activations of one row for every key in `keys` (a multiple of
/// `LANES` long). Uses the widest vector unit the CPU offers; all variants
/// run the same integer hash and the same per-lane addition order, so they
/// agree bit for bit.
fn lane_kernel(keys: &[u64], offsets: &[u64], thresholds: &[u64], values: &[f64], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("avx512dq") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { lane_kernel_avx512(keys, offsets, thresholds, values, out) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { lane_kernel_avx2(keys, offsets, thresholds, values, out) };
        }
    }
    lane_kernel_portable(keys, offsets, thresholds, values, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,avx512vl")]
unsafe fn lane_kernel_avx512(keys: &[u64], offsets: &[u64], thresholds: &[u64], values: &[f64], out: &mut [f64]) {
    lane_kernel_portable(keys, offsets, thresholds, values, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn lane_kernel_avx2(keys: &[u64], offsets: &[u64], thresholds: &[u64], values: &[f64], out: &mut [f64]) {
    lane_kernel_portable(keys, offsets, thresholds, values, out)
}

#[inline(always)]
fn lane_kernel_portable(keys: &[u64], offsets: &[u64], thresholds: &[u64], values: &[f64], out: &mut [f64]) {
    for (kc, oc) in keys.chunks_exact(LANES).zip(out.chunks_exact_mut(LANES)) {
        let mut k = [0u64; LANES];
        k.copy_from_slice(kc);
        let mut acc = [0.0f64; LANES];
        for ((&off, &t), &v) in offsets.iter().zip(thresholds).zip(values) {
            for j in 0..LANES {
                let u = stream::mix64(k[j].wrapping_add(off)) >> 32;
                acc[j] += if u < t { v } else { 0.0 };
            }
        }
        oc.copy_from_slice(&acc);
    }
}

#[inline(always)]
fn counter_offset(n: u64) -> u64 {
    n.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn sampled_layer(layer: &CoinLayer, key: u64, x: &[f64], out: &mut [f64]) {
    for (row, o) in out.iter_mut().enumerate() {
        let coins = &layer.coins[row * layer.fan_in..(row + 1) * layer.fan_in];
        let mut acc = 0.0;
        for (a, (&c, &v)) in coins.iter().zip(x).enumerate() {
            if c == 0 || v == 0.0 {
                continue;
            }
            let u = coin_variate(key, (row * layer.fan_in + a) as u64);
            if u < c.unsigned_abs() {
                acc += if c > 0 { v } else { -v };
            }
        }
        *o = acc + layer.bias[row];
    }
    activate_in_place(layer.activation, out);
}

/// K sampled forward passes for one input; returns the vote histogram.
///
/// `item` selects the mask stream under [`MaskMode::PerInput`] and is
/// ignored under [`MaskMode::Shared`].
pub fn run_sampling(
    model: &BernoulliWeightModel,
    input: &[f64],
    k: usize,
    plan: &SamplerSeedPlan,
    item: u64,
) -> Result<VoteDistribution> {
    if k == 0 {
        return Err(Error::Config("number of samples must be at least 1".into()));
    }
    let sampler = Sampler::new(model, *plan);
    let mut votes = vec![0u16; k];
    sampler.item_votes(item, input, &mut votes)?;
    VoteDistribution::from_votes(&votes, model.output_dim())
}
