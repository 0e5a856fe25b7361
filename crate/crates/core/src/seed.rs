//! Seed plumbing. One global seed expands into independent per-component
//! streams through a SplitMix64 counter scheme, so parallel jobs never share
//! generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Named streams derived from a global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 2,
    Corruption = 3,
    Classifier = 4,
    Sft = 5,
    Train = 6,
    Eval = 7,
    Verify = 8,
    SelfTrain = 9,
}

impl Stream {
    pub const ALL: [Stream; 8] = [
        Stream::Data,
        Stream::Corruption,
        Stream::Classifier,
        Stream::Sft,
        Stream::Train,
        Stream::Eval,
        Stream::Verify,
        Stream::SelfTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Corruption => "corruption",
            Stream::Classifier => "classifier",
            Stream::Sft => "sft",
            Stream::Train => "train",
            Stream::Eval => "eval",
            Stream::Verify => "verify",
            Stream::SelfTrain => "self_train",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for counter `index` under `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream_seed(global: u64, stream: Stream) -> u64 {
    derive(global, stream as u64)
}

pub fn rng_from(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

/// `(name, seed)` pairs for a manifest.
pub fn seed_plan(global: u64) -> Vec<(&'static str, u64)> {
    Stream::ALL
        .iter()
        .map(|s| (s.name(), stream_seed(global, *s)))
        .collect()
}
