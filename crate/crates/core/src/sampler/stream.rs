//! Counter-based randomness for mask draws.
//!
//! Every Bernoulli coin is addressed by `(sample, item, layer, coordinate)`
//! and its uniform variate is a pure hash of that address, so any subset of
//! coins can be drawn in any order, on any thread, with identical results.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const SAMPLER_DOMAIN: u64 = 0x7363_616e_6e5f_6d6b;

/// SplitMix64 output function.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a master seed and a label into an independent child seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = mix64(master ^ 0x6465_7269_7665_0000);
    for chunk in label.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h.wrapping_add(GAMMA) ^ u64::from_le_bytes(word));
    }
    mix64(h ^ label.len() as u64)
}

/// Whether the K masks are redrawn for every input or shared by all inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    PerInput,
    Shared,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-input" => Ok(MaskMode::PerInput),
            "shared" => Ok(MaskMode::Shared),
            other => Err(format!("unknown mask mode {other:?} (per-input, shared)")),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::PerInput => "per-input",
            MaskMode::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSeedPlan {
    pub master_seed: u64,
    pub mask_mode: MaskMode,
}

/// Identifies one Monte Carlo sample, optionally tied to one input item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleId {
    pub k: u64,
    pub item: Option<u64>,
}

impl SamplerSeedPlan {
    pub fn new(master_seed: u64, mask_mode: MaskMode) -> Self {
        SamplerSeedPlan { master_seed, mask_mode }
    }

    /// The sample identity used for item `item`'s k-th draw under this plan.
    pub fn sample_id(&self, item: u64, k: u64) -> SampleId {
        SampleId {
            k,
            item: match self.mask_mode {
                MaskMode::PerInput => Some(item),
                MaskMode::Shared => None,
            },
        }
    }

    /// Key of the coin stream for one layer of one sample.
    #[inline]
    pub fn layer_key(&self, id: SampleId, layer: usize) -> u64 {
        let mut h = mix64(self.master_seed ^ SAMPLER_DOMAIN);
        h = mix64(h ^ id.item.map_or(0, |i| i.wrapping_add(1)));
        h = mix64(h.wrapping_add(id.k.wrapping_mul(GAMMA)));
        mix64(h ^ (layer as u64 + 1))
    }
}

/// 32-bit uniform variate of coin `counter` in the stream `key`.
#[inline(always)]
pub fn coin_variate(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA))) >> 32
}
