use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named random streams of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Init,
    Dropout,
    Sampler,
    Augmentation,
    Synth,
}

impl Stream {
    pub const ALL: [Stream; 5] = [
        Stream::Init,
        Stream::Dropout,
        Stream::Sampler,
        Stream::Augmentation,
        Stream::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Dropout => "dropout",
            Stream::Sampler => "sampler",
            Stream::Augmentation => "augmentation",
            Stream::Synth => "synth",
        }
    }
}

/// 64-bit FNV-1a.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic substreams keyed by `(master seed, stream, level)`. A stream
/// never depends on how much any other stream or level has been consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

pub fn seed_streams(master_seed: u64) -> SeedStreams {
    SeedStreams { master: master_seed }
}

impl SeedStreams {
    pub fn master(&self) -> u64 {
        self.master
    }

    /// 256-bit ChaCha key for one substream.
    pub fn key(&self, stream: Stream, level: usize) -> [u8; 32] {
        let mut h = Fnv::new();
        h.write(&self.master.to_le_bytes());
        h.write(stream.name().as_bytes());
        h.write(&[0xff]);
        h.write(&(level as u64).to_le_bytes());
        let mut state = h.finish();
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
        }
        key
    }

    pub fn rng(&self, stream: Stream, level: usize) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key(stream, level))
    }

    pub fn seed_u64(&self, stream: Stream, level: usize) -> u64 {
        u64::from_le_bytes(self.key(stream, level)[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn draws(mut r: ChaCha8Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| r.next_u64()).collect()
    }

    #[test]
    fn same_master_same_streams() {
        let (a, b) = (seed_streams(42), seed_streams(42));
        for s in Stream::ALL {
            assert_eq!(draws(a.rng(s, 3), 50), draws(b.rng(s, 3), 50));
        }
    }

    #[test]
    fn distinct_names_distinct_draws() {
        let s = seed_streams(42);
        let all: Vec<Vec<u64>> = Stream::ALL.iter().map(|&st| draws(s.rng(st, 0), 1000)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].iter().zip(&all[j]).all(|(x, y)| x != y), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn levels_and_masters_are_isolated() {
        let s = seed_streams(1);
        assert_ne!(draws(s.rng(Stream::Sampler, 2), 4), draws(s.rng(Stream::Sampler, 3), 4));
        assert_ne!(draws(s.rng(Stream::Sampler, 2), 4), draws(seed_streams(2).rng(Stream::Sampler, 2), 4));
        // consuming one level's stream leaves the others where they were
        let before = draws(s.rng(Stream::Dropout, 1), 8);
        let _ = draws(s.rng(Stream::Dropout, 3), 10_000);
        assert_eq!(draws(s.rng(Stream::Dropout, 1), 8), before);
    }
}
