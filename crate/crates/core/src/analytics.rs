//! Vote aggregation: choices, entropy, confusion matrices, accuracy curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Checkpoints of the accuracy-vs-samples curve.
pub const DEFAULT_CHECKPOINTS: [usize; 7] = [1, 3, 10, 30, 100, 300, 1000];

/// Per-class vote counts for one input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteDistribution {
    counts: Vec<u64>,
    total: u64,
}

impl VoteDistribution {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total = counts.iter().sum();
        if total == 0 {
            return Err(Error::Analytics("vote distribution has no votes".into()));
        }
        Ok(VoteDistribution { counts, total })
    }

    pub fn from_votes(votes: &[u16], n_classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; n_classes];
        for &v in votes {
            let v = v as usize;
            if v >= n_classes {
                return Err(Error::ClassIndex { index: v, n_classes });
            }
            counts[v] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn first_choice(&self) -> usize {
        first_choice(self)
    }

    pub fn second_choice(&self) -> Option<usize> {
        second_choice(self)
    }
}

fn best_excluding(counts: &[u64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &n) in counts.iter().enumerate() {
        if Some(c) == skip || n == 0 {
            continue;
        }
        if best.is_none_or(|b| n > counts[b]) {
            best = Some(c);
        }
    }
    best
}

/// Class with the most votes; lowest index on ties.
pub fn first_choice(votes: &VoteDistribution) -> usize {
    best_excluding(&votes.counts, None).expect("a distribution has at least one vote")
}

/// Runner-up class, or `None` when only one class received votes.
pub fn second_choice(votes: &VoteDistribution) -> Option<usize> {
    best_excluding(&votes.counts, Some(first_choice(votes)))
}

/// Entropy of the vote distribution in bits.
pub fn shannon_entropy(votes: &VoteDistribution) -> f64 {
    let total = votes.total as f64;
    let h: f64 = votes
        .counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.log2()
        })
        .sum();
    // a single occupied class gives -1 * log2(1) = -0
    h.max(0.0)
}

/// `log2(n_classes) - H`.
pub fn information(votes: &VoteDistribution, n_classes: usize) -> f64 {
    (n_classes as f64).log2() - shannon_entropy(votes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.n_classes).map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true");
        for c in 0..self.n_classes {
            s.push_str(&format!(",pred_{c}"));
        }
        s.push('\n');
        for (t, row) in self.counts.chunks(self.n_classes).enumerate() {
            s.push_str(&t.to_string());
            for n in row {
                s.push_str(&format!(",{n}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix of first or second choices. Items without a second
/// choice are left out of the second-choice matrix.
pub fn build_confusion(choice: Choice, votes: &[VoteDistribution], labels: &[usize]) -> Result<ConfusionMatrix> {
    if votes.len() != labels.len() {
        return Err(Error::Length {
            what: "labels",
            expected: votes.len(),
            actual: labels.len(),
        });
    }
    let n = votes.iter().map(|v| v.n_classes()).max().unwrap_or(0);
    let n = n.max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
    let mut m = ConfusionMatrix::new(n);
    for (v, &truth) in votes.iter().zip(labels) {
        let pred = match choice {
            Choice::First => Some(v.first_choice()),
            Choice::Second => v.second_choice(),
        };
        if let Some(p) = pred {
            m.counts[truth * n + p] += 1;
        }
    }
    Ok(m)
}

/// Item-major table of sampled votes: `k` votes per item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTable {
    n_items: usize,
    k: usize,
    n_classes: usize,
    votes: Vec<u16>,
}

impl VoteTable {
    /// Panics when `votes.len() != n_items * k`.
    pub fn new(n_items: usize, k: usize, n_classes: usize, votes: Vec<u16>) -> Self {
        assert_eq!(votes.len(), n_items * k, "vote table size");
        VoteTable {
            n_items,
            k,
            n_classes,
            votes,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.votes
    }

    /// Votes of one item, in sample order.
    pub fn row(&self, item: usize) -> &[u16] {
        &self.votes[item * self.k..(item + 1) * self.k]
    }

    pub fn distribution(&self, item: usize) -> Result<VoteDistribution> {
        VoteDistribution::from_votes(self.row(item), self.n_classes)
    }

    pub fn distributions(&self) -> Result<Vec<VoteDistribution>> {
        (0..self.n_items).map(|i| self.distribution(i)).collect()
    }

    /// The table restricted to the first `k` votes of every item.
    pub fn prefix(&self, k: usize) -> Result<VoteTable> {
        if k == 0 || k > self.k {
            return Err(Error::Analytics(format!("prefix {k} outside 1..={}", self.k)));
        }
        let votes = (0..self.n_items)
            .flat_map(|i| self.row(i)[..k].iter().copied())
            .collect();
        Ok(VoteTable::new(self.n_items, k, self.n_classes, votes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub accuracy: f64,
}

/// First-choice accuracy using only the first `k` votes per item, for each
/// checkpoint `k`.
pub fn accuracy_vs_samples(table: &VoteTable, labels: &[usize], checkpoints: &[usize]) -> Result<Vec<CurvePoint>> {
    check_labels(table, labels)?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Analytics("checkpoints must be strictly ascending".into()));
    }
    if let Some(&k) = checkpoints.iter().find(|&&k| k == 0 || k > table.k) {
        return Err(Error::Analytics(format!(
            "checkpoint {k} outside 1..={} samples",
            table.k
        )));
    }
    let mut correct = vec![0u64; checkpoints.len()];
    let mut counts = vec![0u64; table.n_classes];
    for (i, &label) in labels.iter().enumerate() {
        counts.iter_mut().for_each(|c| *c = 0);
        let row = table.row(i);
        let mut next = 0;
        for (seen, &v) in row.iter().enumerate() {
            counts[v as usize] += 1;
            if next < checkpoints.len() && seen + 1 == checkpoints[next] {
                if best_excluding(&counts, None) == Some(label) {
                    correct[next] += 1;
                }
                next += 1;
                if next == checkpoints.len() {
                    break;
                }
            }
        }
    }
    Ok(checkpoints
        .iter()
        .zip(correct)
        .map(|(&k, c)| CurvePoint {
            k,
            accuracy: c as f64 / table.n_items as f64,
        })
        .collect())
}

/// Checkpoints from `DEFAULT_CHECKPOINTS` up to `k`, plus `k` itself.
pub fn checkpoints_up_to(k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = DEFAULT_CHECKPOINTS.iter().copied().filter(|&c| c < k).collect();
    if k > 0 {
        out.push(k);
    }
    out
}

/// Accuracy of each single sample index `k` across all items. Under shared
/// masks this is the test accuracy of the k-th sampled network.
pub fn per_sample_accuracy(table: &VoteTable, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(table, labels)?;
    let mut hits = vec![0u64; table.k];
    for (i, &label) in labels.iter().enumerate() {
        for (h, &v) in hits.iter_mut().zip(table.row(i)) {
            if v as usize == label {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / table.n_items as f64).collect())
}

fn check_labels(table: &VoteTable, labels: &[usize]) -> Result<()> {
    if labels.len() != table.n_items {
        return Err(Error::Length {
            what: "labels",
            expected: table.n_items,
            actual: labels.len(),
        });
    }
    if table.n_items == 0 {
        return Err(Error::Analytics("empty vote table".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemEntropy {
    pub label: usize,
    pub first: usize,
    pub second: Option<usize>,
    pub entropy: f64,
    pub information: f64,
    pub correct: bool,
}

/// Per-item entropy and information with first-choice correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub n_classes: usize,
    pub items: Vec<ItemEntropy>,
}

impl EntropyReport {
    pub fn from_votes(votes: &[VoteDistribution], labels: &[usize], n_classes: usize) -> Result<Self> {
        if votes.len() != labels.len() {
            return Err(Error::Length {
                what: "labels",
                expected: votes.len(),
                actual: labels.len(),
            });
        }
        let items = votes
            .iter()
            .zip(labels)
            .map(|(v, &label)| {
                let first = v.first_choice();
                ItemEntropy {
                    label,
                    first,
                    second: v.second_choice(),
                    entropy: shannon_entropy(v),
                    information: information(v, n_classes),
                    correct: first == label,
                }
            })
            .collect();
        Ok(EntropyReport { n_classes, items })
    }

    pub fn from_table(table: &VoteTable, labels: &[usize]) -> Result<Self> {
        Self::from_votes(&table.distributions()?, labels, table.n_classes)
    }

    pub fn accuracy(&self) -> f64 {
        self.items.iter().filter(|i| i.correct).count() as f64 / self.items.len() as f64
    }

    pub fn entropies_where(&self, pred: impl Fn(&ItemEntropy) -> bool) -> Vec<f64> {
        self.items.iter().filter(|i| pred(i)).map(|i| i.entropy).collect()
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropies_where(|_| true))
    }

    /// Mean entropy of correctly and incorrectly classified items (NaN for
    /// an empty group).
    pub fn mean_entropy_by_correctness(&self) -> (f64, f64) {
        (
            mean(&self.entropies_where(|i| i.correct)),
            mean(&self.entropies_where(|i| !i.correct)),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("item,label,first,second,entropy,information,correct\n");
        for (n, i) in self.items.iter().enumerate() {
            s.push_str(&format!(
                "{n},{},{},{},{},{},{}\n",
                i.label,
                i.first,
                i.second.map_or(String::new(), |c| c.to_string()),
                i.entropy,
                i.information,
                i.correct as u8
            ));
        }
        s
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutEntropy {
    pub holdout_class: usize,
    pub h_in: f64,
    pub h_out: f64,
    pub i_in: f64,
    pub i_out: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// Mean entropy and information of the held-out class ("out") against all
/// other classes ("in").
pub fn holdout_entropy_report(report: &EntropyReport, holdout_class: usize) -> Result<HoldoutEntropy> {
    if holdout_class >= report.n_classes {
        return Err(Error::ClassIndex {
            index: holdout_class,
            n_classes: report.n_classes,
        });
    }
    let (out, inn): (Vec<&ItemEntropy>, Vec<&ItemEntropy>) =
        report.items.iter().partition(|i| i.label == holdout_class);
    if out.is_empty() || inn.is_empty() {
        return Err(Error::Analytics(format!(
            "holdout class {holdout_class} leaves an empty partition ({} out, {} in)",
            out.len(),
            inn.len()
        )));
    }
    let m = |xs: &[&ItemEntropy], f: fn(&ItemEntropy) -> f64| xs.iter().map(|i| f(i)).sum::<f64>() / xs.len() as f64;
    Ok(HoldoutEntropy {
        holdout_class,
        h_in: m(&inn, |i| i.entropy),
        h_out: m(&out, |i| i.entropy),
        i_in: m(&inn, |i| i.information),
        i_out: m(&out, |i| i.information),
        n_in: inn.len(),
        n_out: out.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    pub resamples: usize,
}

impl BootstrapCi {
    pub fn excludes_zero(&self) -> bool {
        self.low > 0.0 || self.high < 0.0
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Percentile bootstrap interval for `mean(a) - mean(b)`, resampling each
/// group independently with replacement.
pub fn bootstrap_mean_difference(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Analytics("bootstrap needs two nonempty groups".into()));
    }
    if resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(Error::Analytics(format!(
            "bootstrap needs resamples >= 1 and level in (0, 1), got {resamples} and {level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |xs: &[f64], rng: &mut ChaCha8Rng| {
        (0..xs.len()).map(|_| xs[rng.gen_range(0..xs.len())]).sum::<f64>() / xs.len() as f64
    };
    let mut diffs: Vec<f64> = (0..resamples)
        .map(|_| {
            let ma = draw(a, &mut rng);
            ma - draw(b, &mut rng)
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| {
        let idx = (q * (resamples - 1) as f64).round() as usize;
        diffs[idx.min(resamples - 1)]
    };
    Ok(BootstrapCi {
        estimate: mean(a) - mean(b),
        low: at(tail),
        high: at(1.0 - tail),
        resamples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
}

/// Equal-width bins over `[low, high]`; the last bin is closed on the right
/// and values outside the range are clamped into the edge bins.
pub fn histogram(values: &[f64], bins: usize, low: f64, high: f64) -> Result<Vec<HistogramBin>> {
    if bins == 0 || !(high > low) {
        return Err(Error::Analytics(format!(
            "bad histogram range [{low}, {high}] with {bins} bins"
        )));
    }
    let width = (high - low) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = ((v - low) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            low: low + i as f64 * width,
            high: if i + 1 == bins {
                high
            } else {
                low + (i + 1) as f64 * width
            },
            count,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(c: &[u64]) -> VoteDistribution {
        VoteDistribution::from_counts(c.to_vec()).unwrap()
    }

    #[test]
    fn choices() {
        let mut c = vec![0u64; 10];
        c[0] = 900;
        c[1] = 100;
        let v = dist(&c);
        assert_eq!((v.first_choice(), v.second_choice()), (0, Some(1)));

        let mut c = vec![0u64; 10];
        c[6] = 50;
        let v = dist(&c);
        assert_eq!((v.first_choice(), v.second_choice()), (6, None));

        let mut c = vec![0u64; 10];
        c[3] = 500;
        c[7] = 500;
        let v = dist(&c);
        assert_eq!((v.first_choice(), v.second_choice()), (3, Some(7)));
        assert!(VoteDistribution::from_counts(vec![0; 4]).is_err());
    }

    #[test]
    fn entropy_and_information_examples() {
        let mut one = vec![0u64; 10];
        one[2] = 1000;
        assert_eq!(shannon_entropy(&dist(&one)), 0.0);
        assert_eq!(information(&dist(&one), 10), 10f64.log2());

        let uniform = dist(&[100; 10]);
        assert!((shannon_entropy(&uniform) - 10f64.log2()).abs() < 1e-12);
        assert!(information(&uniform, 10).abs() < 1e-12);

        let v = dist(&[1, 1, 2]);
        assert!((shannon_entropy(&v) - 1.5).abs() < 1e-15);
        assert!((information(&v, 3) - 0.08496).abs() < 1e-5);
    }

    #[test]
    fn confusion_examples() {
        let votes: Vec<_> = (0..4)
            .map(|c| {
                let mut x = vec![0u64; 4];
                x[c] = 3;
                dist(&x)
            })
            .collect();
        let m = build_confusion(Choice::First, &votes, &[0, 1, 2, 3]).unwrap();
        assert_eq!(m.trace(), 4);
        assert_eq!(m.total(), 4);
        // nobody has a second choice
        assert_eq!(
            build_confusion(Choice::Second, &votes, &[0, 1, 2, 3]).unwrap().total(),
            0
        );

        let mut x = vec![0u64; 10];
        x[9] = 7;
        x[4] = 2;
        let m = build_confusion(Choice::First, &[dist(&x)], &[4]).unwrap();
        assert_eq!(m.get(4, 9), 1);
        assert_eq!(m.total(), 1);
        let m2 = build_confusion(Choice::Second, &[dist(&x)], &[4]).unwrap();
        assert_eq!(m2.get(4, 4), 1);
        assert!(build_confusion(Choice::First, &[dist(&x)], &[4, 1]).is_err());
        assert!(m.to_csv().starts_with("true,pred_0,"));
    }

    #[test]
    fn curve_prefix_and_errors() {
        // item 0 (label 1): votes 0,1,1 -> wrong at k=1, right at k=3
        let t = VoteTable::new(2, 3, 2, vec![0, 1, 1, 1, 1, 1]);
        let labels = [1, 1];
        let c = accuracy_vs_samples(&t, &labels, &[1, 2, 3]).unwrap();
        assert_eq!(c.iter().map(|p| p.accuracy).collect::<Vec<_>>(), vec![0.5, 0.5, 1.0]);
        let full = EntropyReport::from_table(&t, &labels).unwrap().accuracy();
        assert_eq!(c[2].accuracy, full);
        assert!(accuracy_vs_samples(&t, &labels, &[4]).is_err());
        assert!(accuracy_vs_samples(&t, &labels, &[2, 1]).is_err());
        assert_eq!(per_sample_accuracy(&t, &labels).unwrap(), vec![0.5, 1.0, 1.0]);
        assert_eq!(checkpoints_up_to(50), vec![1, 3, 10, 30, 50]);
        assert_eq!(checkpoints_up_to(1000), DEFAULT_CHECKPOINTS.to_vec());
    }

    #[test]
    fn holdout_partition() {
        let votes = vec![dist(&[5, 5, 0]), dist(&[10, 0, 0]), dist(&[0, 9, 1])];
        let r = EntropyReport::from_votes(&votes, &[0, 0, 1], 3).unwrap();
        let h = holdout_entropy_report(&r, 0).unwrap();
        assert_eq!((h.n_out, h.n_in), (2, 1));
        assert!((h.h_out - 0.5).abs() < 1e-15);
        assert!((h.i_out - (3f64.log2() - h.h_out)).abs() < 1e-12);
        assert!(holdout_entropy_report(&r, 2).is_err());
        assert!(holdout_entropy_report(&r, 3).is_err());
    }

    #[test]
    fn bootstrap_behaviour() {
        let a: Vec<f64> = (0..200).map(|i| 1.0 + (i % 7) as f64 * 0.01).collect();
        let b: Vec<f64> = (0..300).map(|i| (i % 5) as f64 * 0.01).collect();
        let ci = bootstrap_mean_difference(&a, &b, 1000, 0.95, 1).unwrap();
        assert!(ci.excludes_zero() && ci.low <= ci.estimate && ci.estimate <= ci.high);
        let same = bootstrap_mean_difference(&b, &b, 1000, 0.95, 1).unwrap();
        assert!(same.contains(0.0));
        assert_eq!(ci, bootstrap_mean_difference(&a, &b, 1000, 0.95, 1).unwrap());
        assert!(bootstrap_mean_difference(&[], &b, 10, 0.95, 1).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0, 2.0, -1.0], 2, 0.0, 1.0).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 3]);
        assert_eq!(h[1].high, 1.0);
        assert!(histogram(&[], 0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounds(counts in prop::collection::vec(0u64..50, 2..12)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let v = dist(&counts);
            let n = counts.len();
            let h = shannon_entropy(&v);
            prop_assert!(h >= 0.0 && h <= (n as f64).log2() + 1e-12);
            prop_assert!((information(&v, n) + h - (n as f64).log2()).abs() <= 1e-12);
            if let Some(s) = v.second_choice() {
                prop_assert_ne!(s, v.first_choice());
                prop_assert!(counts[s] <= counts[v.first_choice()]);
            }
        }

        #[test]
        fn curve_only_sees_prefix(
            votes in prop::collection::vec(0u16..4, 40),
            tail in prop::collection::vec(0u16..4, 40),
        ) {
            // 4 items x 10 votes; rewriting the last 5 votes of every item
            // leaves checkpoints <= 5 unchanged
            let labels = [0, 1, 2, 3];
            let a = VoteTable::new(4, 10, 4, votes.clone());
            let mut mixed = votes;
            for i in 0..4 {
                mixed[i * 10 + 5..i * 10 + 10].copy_from_slice(&tail[i * 10..i * 10 + 5]);
            }
            let b = VoteTable::new(4, 10, 4, mixed);
            prop_assert_eq!(
                accuracy_vs_samples(&a, &labels, &[1, 3, 5]).unwrap(),
                accuracy_vs_samples(&b, &labels, &[1, 3, 5]).unwrap()
            );
        }
    }
}
