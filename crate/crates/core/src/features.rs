//! Hashed n-gram features over token sequences.
//!
//! A conditioning context is split into segments (hidden info, interaction
//! history, the in-progress action). Each segment contributes a bag of
//! n-grams tagged with the segment it came from; the tail of history ⊕ action
//! additionally contributes position-sensitive suffix n-grams. Every feature
//! is an index in `[0, width)`.

use serde::{Deserialize, Serialize};

use crate::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub width: usize,
    /// Highest n-gram order for the segment bags (0 disables bags).
    pub bag_order: usize,
    /// Highest order of the suffix n-grams (0 disables them).
    pub suffix_order: usize,
    pub bias: bool,
    /// Emit a feature for the number of action tokens generated so far.
    pub position: bool,
    /// Emit a feature for the number of completed turns in the history.
    pub turns: bool,
    /// Context features get separate weights for each of the first
    /// `context_positions` action positions; later positions share the last
    /// set. 1 shares one set across the whole action.
    pub context_positions: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            width: 1 << 16,
            bag_order: 3,
            suffix_order: 3,
            bias: true,
            position: true,
            turns: true,
            context_positions: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Segment {
    Bias = 0,
    Hidden = 1,
    History = 2,
    Suffix = 3,
    Position = 4,
    Action = 5,
    Turns = 6,
    Continuation = 7,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn fnv_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[inline]
fn finalize(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    pub config: FeatureConfig,
    pub seed: u64,
}

impl FeatureHasher {
    pub fn new(config: FeatureConfig, seed: u64) -> Self {
        assert!(config.width > 0, "feature width must be positive");
        Self { config, seed }
    }

    fn start(&self, segment: Segment) -> u64 {
        let h = fnv_bytes(FNV_OFFSET, &self.seed.to_le_bytes());
        fnv_bytes(h, &[segment as u8])
    }

    fn index(&self, h: u64) -> u32 {
        (finalize(h) % self.config.width as u64) as u32
    }

    pub fn hash_tokens<'a>(
        &self,
        segment: Segment,
        tokens: impl IntoIterator<Item = &'a Token>,
    ) -> u32 {
        let mut h = self.start(segment);
        for t in tokens {
            h = fnv_bytes(h, t.as_bytes());
            h = fnv_bytes(h, &[0x1f]);
        }
        self.index(h)
    }

    pub fn bias(&self, out: &mut Vec<u32>) {
        if self.config.bias {
            out.push(self.index(self.start(Segment::Bias)));
        }
    }

    /// All n-grams of orders `1..=bag_order` in `tokens`.
    pub fn bag(&self, segment: Segment, tokens: &[Token], out: &mut Vec<u32>) {
        for n in 1..=self.config.bag_order.min(tokens.len()) {
            for gram in tokens.windows(n) {
                out.push(self.hash_tokens(segment, gram));
            }
        }
    }

    /// Suffix n-grams of `head ⊕ tail`, orders `1..=suffix_order`.
    pub fn suffix(&self, head: &[Token], tail: &[Token], out: &mut Vec<u32>) {
        let total = head.len() + tail.len();
        for n in 1..=self.config.suffix_order.min(total) {
            let start = total - n;
            let gram = (start..total).map(|i| {
                if i < head.len() {
                    &head[i]
                } else {
                    &tail[i - head.len()]
                }
            });
            out.push(self.hash_tokens(Segment::Suffix, gram));
        }
    }

    pub fn position(&self, len: usize, out: &mut Vec<u32>) {
        if self.config.position {
            let h = fnv_bytes(self.start(Segment::Position), &(len as u64).to_le_bytes());
            out.push(self.index(h));
        }
    }
}

impl FeatureHasher {
    /// Which weight set a context feature uses at action position `pos`.
    pub fn context_slot(&self, pos: usize) -> usize {
        pos.min(self.config.context_positions.max(1) - 1)
    }

    /// The index context feature `f` takes in weight set `slot`.
    pub fn at_slot(&self, f: u32, slot: usize) -> u32 {
        if slot == 0 {
            f
        } else {
            let h = fnv_bytes(self.start(Segment::Continuation), &f.to_le_bytes());
            self.index(fnv_bytes(h, &(slot as u64).to_le_bytes()))
        }
    }

    /// Completed turns, counted as occurrences of `marker` in `history`.
    pub fn turns(&self, history: &[Token], marker: &str, out: &mut Vec<u32>) {
        if self.config.turns {
            let n = history.iter().filter(|t| *t == marker).count() as u64;
            out.push(self.index(fnv_bytes(self.start(Segment::Turns), &n.to_le_bytes())));
        }
    }
}

/// Sorts and removes duplicate feature indices (presence semantics).
pub fn dedup(features: &mut Vec<u32>) {
    features.sort_unstable();
    features.dedup();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let h = FeatureHasher::new(FeatureConfig::default(), 7);
        let mut a = Vec::new();
        let mut b = Vec::new();
        h.bag(Segment::History, &toks("color = red"), &mut a);
        h.bag(Segment::History, &toks("color = red"), &mut b);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 + 2 + 1);
        assert!(a.iter().all(|&i| (i as usize) < h.config.width));
    }

    #[test]
    fn segments_and_seeds_separate_features() {
        let h = FeatureHasher::new(FeatureConfig::default(), 7);
        let t = toks("red");
        assert_ne!(
            h.hash_tokens(Segment::History, &t),
            h.hash_tokens(Segment::Hidden, &t)
        );
        let h2 = FeatureHasher::new(FeatureConfig::default(), 8);
        assert_ne!(
            h.hash_tokens(Segment::History, &t),
            h2.hash_tokens(Segment::History, &t)
        );
    }

    #[test]
    fn suffix_spans_the_join() {
        let h = FeatureHasher::new(FeatureConfig::default(), 1);
        let mut split = Vec::new();
        h.suffix(&toks("a b"), &toks("c"), &mut split);
        let mut whole = Vec::new();
        h.suffix(&toks("x a b c"), &[], &mut whole);
        assert_eq!(split, whole);
    }
}
