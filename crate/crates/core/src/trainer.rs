//! Mini-batch training of weight-constrained networks.
//!
//! RMSProp on the mean categorical cross-entropy, inverted dropout on hidden
//! layers, and a projection of every weight into `[clip_low, clip_high]`
//! after each optimizer step. One seeded ChaCha stream drives initialization,
//! shuffling and dropout, so a run is a pure function of its config.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{argmax, matvec_into, ActivationKind, Matrix, Vector, PROB_FLOOR};
use crate::model::{LayerParams, NetworkMeta, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub dropout_rate: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub hidden_activation: ActivationKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 100,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            dropout_rate: 0.2,
            clip_low: -1.0,
            clip_high: 1.0,
            init_low: -0.99,
            init_high: 0.99,
            hidden_activation: ActivationKind::Relu,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.clip_low < self.clip_high) {
            return bad("clip_low must be below clip_high");
        }
        if !(self.init_low <= self.init_high && self.init_low >= self.clip_low && self.init_high <= self.clip_high) {
            return bad("init bounds must be ordered and inside the clip bounds");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_epsilon > 0.0) {
            return bad("rmsprop_decay must lie in [0, 1) and epsilon be positive");
        }
        if matches!(self.hidden_activation, ActivationKind::Softmax) {
            return bad("softmax is only supported on the output layer");
        }
        Ok(())
    }
}

/// Uniform weights in `[init_low, init_high]`, zero biases, hidden layers use
/// `cfg.hidden_activation`, the output layer softmax.
pub fn init_network(arch: &[usize], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<NetworkSpec> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::Architecture(format!(
            "need at least two nonzero layer widths, got {arch:?}"
        )));
    }
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for (i, pair) in arch.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let weights = Matrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(cfg.init_low..=cfg.init_high));
        let activation = if i + 2 == arch.len() {
            ActivationKind::Softmax
        } else {
            cfg.hidden_activation
        };
        layers.push(LayerParams::new(weights, Vector::zeros(fan_out), activation)?);
    }
    NetworkSpec::new(
        layers,
        NetworkMeta {
            name: String::new(),
            seed: cfg.seed,
            dataset: String::new(),
        },
    )
}

/// Activations of one forward pass over a batch of `batch` inputs.
///
/// `inputs[l]` is the (post-dropout) input of layer `l`, `batch x fan_in`.
/// `hidden[l]` is the pre-dropout output of hidden layer `l` and
/// `masks[l]` its dropout scale (0 or `1/(1-rate)`); empty when dropout is
/// off. `output` holds the final softmax probabilities.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub inputs: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardCache {
    pub fn output_row(&self, s: usize, n_out: usize) -> &[f64] {
        &self.output[s * n_out..(s + 1) * n_out]
    }
}

/// Per-parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &NetworkSpec) -> Self {
        Gradients {
            weights: net
                .layers()
                .iter()
                .map(|l| vec![0.0; l.weights.as_slice().len()])
                .collect(),
            biases: net.layers().iter().map(|l| vec![0.0; l.fan_out()]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub weight_sq: Vec<Vec<f64>>,
    pub bias_sq: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(net: &NetworkSpec) -> Self {
        let g = Gradients::zeros_like(net);
        OptimizerState {
            weight_sq: g.weights,
            bias_sq: g.biases,
            step: 0,
        }
    }
}

fn draw_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Single-input forward pass with inverted dropout on hidden layers.
///
/// Uses the same ascending-order kernels as [`NetworkSpec::forward`], so with
/// `dropout_rate == 0` the output is bit-identical to deterministic inference.
pub fn forward_with_dropout(
    net: &NetworkSpec,
    input: &[f64],
    dropout_rate: f64,
    rng: &mut impl Rng,
) -> Result<ForwardCache> {
    if input.len() != net.input_dim() {
        return Err(Error::Length {
            what: "network input",
            expected: net.input_dim(),
            actual: input.len(),
        });
    }
    let n = net.layers().len();
    let mut cache = ForwardCache {
        batch: 1,
        inputs: vec![input.to_vec()],
        hidden: Vec::new(),
        masks: Vec::new(),
        output: Vec::new(),
    };
    for (l, layer) in net.layers().iter().enumerate() {
        let mut z = vec![0.0; layer.fan_out()];
        matvec_into(&layer.weights, &cache.inputs[l], &mut z)?;
        for (v, b) in z.iter_mut().zip(layer.bias.iter()) {
            *v += b;
        }
        crate::math::activate_in_place(layer.activation, &mut z);
        if l + 1 == n {
            cache.output = z;
        } else {
            let next = if dropout_rate > 0.0 {
                let mask = draw_mask(z.len(), dropout_rate, rng);
                let dropped = z.iter().zip(&mask).map(|(a, m)| a * m).collect();
                cache.masks.push(mask);
                dropped
            } else {
                z.clone()
            };
            cache.hidden.push(z);
            cache.inputs.push(next);
        }
    }
    Ok(cache)
}

/// `c = beta*c + a·b` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Batched forward pass; `x` is `batch x input_dim` row-major.
pub fn forward_batch(
    net: &NetworkSpec,
    x: &[f64],
    batch: usize,
    dropout_rate: f64,
    rng: &mut impl Rng,
) -> ForwardCache {
    let n = net.layers().len();
    let mut cache = ForwardCache {
        batch,
        inputs: vec![x.to_vec()],
        hidden: Vec::new(),
        masks: Vec::new(),
        output: Vec::new(),
    };
    for (l, layer) in net.layers().iter().enumerate() {
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let mut z = vec![0.0; batch * fan_out];
        for row in z.chunks_exact_mut(fan_out) {
            row.copy_from_slice(&layer.bias);
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            &cache.inputs[l],
            (fan_in, 1),
            layer.weights.as_slice(),
            (1, fan_in),
            1.0,
            &mut z,
            fan_out,
        );
        for row in z.chunks_exact_mut(fan_out) {
            crate::math::activate_in_place(layer.activation, row);
        }
        if l + 1 == n {
            cache.output = z;
        } else {
            let next = if dropout_rate > 0.0 {
                let mask = draw_mask(z.len(), dropout_rate, rng);
                let dropped = z.iter().zip(&mask).map(|(a, m)| a * m).collect();
                cache.masks.push(mask);
                dropped
            } else {
                z.clone()
            };
            cache.hidden.push(z);
            cache.inputs.push(next);
        }
    }
    cache
}

/// Gradients of the mean cross-entropy over the cached batch.
///
/// The output layer must be softmax; hidden layers may be ReLU, sigmoid or
/// identity.
pub fn backprop(net: &NetworkSpec, cache: &ForwardCache, targets: &[usize]) -> Result<Gradients> {
    let layers = net.layers();
    let n = layers.len();
    let batch = cache.batch;
    if targets.len() != batch {
        return Err(Error::Length {
            what: "targets",
            expected: batch,
            actual: targets.len(),
        });
    }
    let n_out = net.output_dim();
    if layers[n - 1].activation != ActivationKind::Softmax {
        return Err(Error::Architecture("output layer must be softmax".into()));
    }
    let inv = 1.0 / batch as f64;
    let mut delta = cache.output.clone();
    for (s, &t) in targets.iter().enumerate() {
        if t >= n_out {
            return Err(Error::ClassIndex {
                index: t,
                n_classes: n_out,
            });
        }
        delta[s * n_out + t] -= 1.0;
    }
    delta.iter_mut().for_each(|d| *d *= inv);

    let mut grads = Gradients::zeros_like(net);
    for l in (0..n).rev() {
        let layer = &layers[l];
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        gemm(
            fan_out,
            batch,
            fan_in,
            &delta,
            (1, fan_out),
            &cache.inputs[l],
            (fan_in, 1),
            0.0,
            &mut grads.weights[l],
            fan_in,
        );
        let gb = &mut grads.biases[l];
        for row in delta.chunks_exact(fan_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; batch * fan_in];
        gemm(
            batch,
            fan_out,
            fan_in,
            &delta,
            (fan_out, 1),
            layer.weights.as_slice(),
            (fan_in, 1),
            0.0,
            &mut prev,
            fan_in,
        );
        let h = &cache.hidden[l - 1];
        let act = layers[l - 1].activation;
        for (i, p) in prev.iter_mut().enumerate() {
            if let Some(mask) = cache.masks.get(l - 1) {
                *p *= mask[i];
            }
            *p *= match act {
                ActivationKind::Relu => {
                    if h[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                ActivationKind::Sigmoid => h[i] * (1.0 - h[i]),
                ActivationKind::Identity => 1.0,
                ActivationKind::Softmax => {
                    return Err(Error::Architecture(
                        "softmax is only supported on the output layer".into(),
                    ))
                }
            };
        }
        delta = prev;
    }
    Ok(grads)
}

/// Mean cross-entropy of the cached outputs.
pub fn batch_loss(cache: &ForwardCache, targets: &[usize], n_out: usize) -> f64 {
    let mut sum = 0.0;
    for (s, &t) in targets.iter().enumerate() {
        sum += -cache.output[s * n_out + t].max(PROB_FLOOR).ln();
    }
    sum / targets.len() as f64
}

/// Central finite differences of the mean loss (dropout off) with step `h`.
pub fn numerical_gradients(net: &NetworkSpec, x: &[f64], targets: &[usize], h: f64) -> Gradients {
    let batch = targets.len();
    let n_out = net.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probe = net.clone();
    let mut loss = |p: &NetworkSpec| batch_loss(&forward_batch(p, x, batch, 0.0, &mut rng), targets, n_out);
    let mut grads = Gradients::zeros_like(net);
    for l in 0..net.layers().len() {
        for i in 0..grads.weights[l].len() {
            let w0 = net.layers()[l].weights.as_slice()[i];
            probe.layers_mut()[l].weights.as_mut_slice()[i] = w0 + h;
            let up = loss(&probe);
            probe.layers_mut()[l].weights.as_mut_slice()[i] = w0 - h;
            let down = loss(&probe);
            probe.layers_mut()[l].weights.as_mut_slice()[i] = w0;
            grads.weights[l][i] = (up - down) / (2.0 * h);
        }
        for i in 0..grads.biases[l].len() {
            let b0 = net.layers()[l].bias[i];
            probe.layers_mut()[l].bias[i] = b0 + h;
            let up = loss(&probe);
            probe.layers_mut()[l].bias[i] = b0 - h;
            let down = loss(&probe);
            probe.layers_mut()[l].bias[i] = b0;
            grads.biases[l][i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all parameters.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    let pairs = a
        .weights
        .iter()
        .chain(&a.biases)
        .flatten()
        .zip(b.weights.iter().chain(&b.biases).flatten());
    pairs
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// One RMSProp update followed by weight clipping.
pub fn rmsprop_step(net: &mut NetworkSpec, grads: &Gradients, state: &mut OptimizerState, cfg: &TrainConfig) {
    let (rho, lr, eps) = (cfg.rmsprop_decay, cfg.learning_rate, cfg.rmsprop_epsilon);
    let update = |params: &mut [f64], g: &[f64], acc: &mut [f64]| {
        for ((p, &g), a) in params.iter_mut().zip(g).zip(acc.iter_mut()) {
            *a = rho * *a + (1.0 - rho) * g * g;
            *p -= lr * g / (a.sqrt() + eps);
        }
    };
    for (l, layer) in net.layers_mut().iter_mut().enumerate() {
        update(layer.weights.as_mut_slice(), &grads.weights[l], &mut state.weight_sq[l]);
        update(&mut layer.bias, &grads.biases[l], &mut state.bias_sq[l]);
    }
    state.step += 1;
    clip_weights(net, cfg.clip_low, cfg.clip_high);
}

/// Projects every weight into `[low, high]`; biases are untouched.
pub fn clip_weights(net: &mut NetworkSpec, low: f64, high: f64) {
    for layer in net.layers_mut() {
        for w in layer.weights.as_mut_slice() {
            *w = w.clamp(low, high);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// `epoch,loss,train_acc,test_acc` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,test_acc\n");
        for e in &self.epochs {
            let test = e.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9},{:.6},{}\n", e.epoch, e.loss, e.train_accuracy, test));
        }
        s
    }
}

/// Argmax accuracy of the deterministic network using batched kernels.
pub fn batch_accuracy(net: &NetworkSpec, data: &Dataset) -> f64 {
    const CHUNK: usize = 500;
    let dim = data.dim();
    let n_out = net.output_dim();
    let mut correct = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let x = &data.images().as_slice()[start * dim..end * dim];
        let cache = forward_batch(net, x, end - start, 0.0, &mut rng);
        for s in 0..end - start {
            if argmax(cache.output_row(s, n_out)) == data.label(start + s) {
                correct += 1;
            }
        }
    }
    correct as f64 / data.len().max(1) as f64
}

/// Trains a fresh network on `train`; `test`, when given, is scored after
/// every epoch for the log only. `on_epoch` sees each epoch's stats.
pub fn train(
    train: &Dataset,
    test: Option<&Dataset>,
    arch: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(NetworkSpec, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if arch.first() != Some(&train.dim()) {
        return Err(Error::Architecture(format!(
            "input width {:?} does not match dataset dimension {}",
            arch.first(),
            train.dim()
        )));
    }
    let n_out = *arch.last().unwrap();
    if train.n_classes() > n_out {
        return Err(Error::Architecture(format!(
            "dataset has {} classes but the output layer has {n_out} units",
            train.n_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = init_network(arch, cfg, &mut rng)?;
    net.meta.dataset = train.tag().to_string();
    let mut state = OptimizerState::new(&net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let dim = train.dim();
    let mut log = TrainLog::default();
    let mut xb = Vec::with_capacity(cfg.batch_size * dim);
    let mut yb = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(train.image(i));
                yb.push(train.label(i));
            }
            let cache = forward_batch(&net, &xb, chunk.len(), cfg.dropout_rate, &mut rng);
            loss_sum += batch_loss(&cache, &yb, n_out) * chunk.len() as f64;
            for (s, &t) in yb.iter().enumerate() {
                if argmax(cache.output_row(s, n_out)) == t {
                    correct += 1;
                }
            }
            let grads = backprop(&net, &cache, &yb)?;
            rmsprop_step(&mut net, &grads, &mut state, cfg);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy: test.map(|t| batch_accuracy(&net, t)),
        };
        on_epoch(&stats);
        log.epochs.push(stats);
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn small_net(dims: &[usize], seed: u64) -> NetworkSpec {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = init_network(dims, &cfg, &mut rng).unwrap();
        for l in net.layers_mut() {
            for b in l.bias.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        net
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = TrainConfig::default();
        let a = init_network(&[20, 10, 3], &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_network(&[20, 10, 3], &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for l in a.layers() {
            assert!(l.weights.as_slice().iter().all(|w| (-0.99..=0.99).contains(w)));
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
        assert!(init_network(&[5], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn init_weight_mean_near_zero() {
        // U(-0.99, 0.99): variance 0.99^2/3
        let cfg = TrainConfig::default();
        let net = init_network(&[1000, 100], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let w = net.layers()[0].weights.as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sigma = (0.99f64 * 0.99 / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3 sigma {}", 3.0 * sigma);
    }

    #[test]
    fn dropout_zero_matches_deterministic() {
        let net = small_net(&[6, 5, 4, 3], 1);
        let x = [0.1, 0.9, 0.3, 0.0, 0.5, 0.7];
        let cache = forward_with_dropout(&net, &x, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(cache.output, net.forward(&x).unwrap().into_vec());
        assert!(cache.masks.is_empty());
    }

    #[test]
    fn dropout_keep_scales_by_inverse_rate() {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(3);
        let net = small_net(&[6, 50, 3], 2);
        let x = [0.2; 6];
        let cache = forward_with_dropout(&net, &x, 0.5, &mut mask_rng).unwrap();
        for (i, &m) in cache.masks[0].iter().enumerate() {
            assert!(m == 0.0 || m == 2.0);
            assert_eq!(cache.inputs[1][i], cache.hidden[0][i] * m);
        }
    }

    #[test]
    fn dropout_fraction_matches_rate() {
        let n = 100_000usize;
        let rate = 0.2;
        let mask = draw_mask(n, rate, &mut ChaCha8Rng::seed_from_u64(4));
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((dropped - n as f64 * rate).abs() < 3.0 * sigma);
    }

    #[test]
    fn batched_forward_agrees_with_matvec_path() {
        let net = small_net(&[30, 20, 5], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..4 * 30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cache = forward_batch(&net, &x, 4, 0.0, &mut rng);
        for s in 0..4 {
            let y = net.forward(&x[s * 30..(s + 1) * 30]).unwrap();
            for (a, b) in y.iter().zip(cache.output_row(s, 5)) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (act, seed) in [
            (ActivationKind::Sigmoid, 1),
            (ActivationKind::Relu, 2),
            (ActivationKind::Identity, 3),
        ] {
            let cfg = TrainConfig {
                hidden_activation: act,
                ..TrainConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = init_network(&[6, 4, 3], &cfg, &mut rng).unwrap();
            let x: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let targets = [0, 2, 1, 1, 0];
            let cache = forward_batch(&net, &x, 5, 0.0, &mut rng);
            let analytic = backprop(&net, &cache, &targets).unwrap();
            let numeric = numerical_gradients(&net, &x, &targets, 1e-6);
            let err = max_relative_error(&analytic, &numeric, 1e-7);
            assert!(err < 1e-4, "{act:?}: relative error {err}");
        }
    }

    #[test]
    fn zero_weight_softmax_bias_gradient() {
        let w = Matrix::zeros(4, 3);
        let net = NetworkSpec::new(
            vec![LayerParams::new(w, Vector::zeros(4), ActivationKind::Softmax).unwrap()],
            NetworkMeta::default(),
        )
        .unwrap();
        let cache = forward_with_dropout(&net, &[0.3, 0.1, 0.2], 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = backprop(&net, &cache, &[2]).unwrap();
        assert!((g.biases[0][2] - (0.25 - 1.0)).abs() < 1e-15);
        assert!((g.biases[0][0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn duplicated_example_gives_same_gradient() {
        let net = small_net(&[5, 4, 3], 6);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = forward_batch(&net, &x, 1, 0.0, &mut rng);
        let xx: Vec<f64> = x.iter().chain(x.iter()).copied().collect();
        let two = forward_batch(&net, &xx, 2, 0.0, &mut rng);
        let g1 = backprop(&net, &one, &[1]).unwrap();
        let g2 = backprop(&net, &two, &[1, 1]).unwrap();
        for (a, b) in g1.weights.iter().flatten().zip(g2.weights.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rmsprop_rules() {
        let mut net = small_net(&[3, 2], 1);
        let before = net.clone();
        let cfg = TrainConfig::default();
        let mut state = OptimizerState::new(&net);
        let zero = Gradients::zeros_like(&net);
        rmsprop_step(&mut net, &zero, &mut state, &cfg);
        assert_eq!(net, before);

        let mut g = Gradients::zeros_like(&net);
        g.weights[0][0] = 0.5;
        let mut state = OptimizerState::new(&net);
        rmsprop_step(&mut net, &g, &mut state, &cfg);
        assert!((state.weight_sq[0][0] - 0.1 * 0.25).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn clipping() {
        let mut w = Matrix::zeros(1, 3);
        w.set(0, 0, 1.7);
        w.set(0, 1, -4.0);
        w.set(0, 2, 0.3);
        let mut net = NetworkSpec::new(
            vec![LayerParams::new(w, Vector::from(vec![5.0]), ActivationKind::Softmax).unwrap()],
            NetworkMeta::default(),
        )
        .unwrap();
        clip_weights(&mut net, -1.0, 1.0);
        assert_eq!(net.layers()[0].weights.as_slice(), &[1.0, -1.0, 0.3]);
        assert_eq!(net.layers()[0].bias[0], 5.0);
        let snapshot = net.clone();
        clip_weights(&mut net, -1.0, 1.0);
        assert_eq!(net, snapshot);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                dropout_rate: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                clip_low: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                init_high: 1.5,
                ..ok.clone()
            },
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = synthetic_blobs(2, 8, 200, 0.6, 3);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 20,
            learning_rate: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let (net, log) = train(&data, None, &[8, 16, 2], &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 15);
        assert_eq!(log.epochs.len(), 15);
        assert!(net.validate_unit_interval().is_empty());
        assert!(batch_accuracy(&net, &data) >= 0.99);
    }

    #[test]
    fn training_rejects_mismatched_arch() {
        let data = synthetic_blobs(3, 4, 10, 0.5, 1);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(train(&data, None, &[5, 3], &cfg, |_| {}).is_err());
        assert!(train(&data, None, &[4, 2], &cfg, |_| {}).is_err());
    }
}
