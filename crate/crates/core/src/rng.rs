//! Seed derivation for independent random streams.
//!
//! Every consumer of randomness (a client in a round, the partitioner, a
//! strategy's fresh interactions) gets its own ChaCha stream derived from the
//! master seed and a few coordinates. Changing who participates in a round
//! therefore never shifts anyone else's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tag separating otherwise identical (client, round) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Partition,
    Targets,
    /// Federated training, including fine-tuning which continues it.
    Train,
    Retrain,
    FedEraser,
    FedRemove,
    GradientAscent,
    RelevancyReset,
    /// Interactions served by the frozen baseline model.
    Frozen,
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Partition => 0x5041_5254,
            Stream::Targets => 0x5441_5247,
            Stream::Train => 0x5452_4149,
            Stream::Retrain => 0x5245_5452,
            Stream::FedEraser => 0x4645_4445,
            Stream::FedRemove => 0x4645_4452,
            Stream::GradientAscent => 0x4741_5343,
            Stream::RelevancyReset => 0x5245_4c52,
            Stream::Frozen => 0x4652_4f5a,
            Stream::Synthetic => 0x5359_4e54,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, client: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    for word in [stream.tag(), client, round] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream_rng(master: u64, stream: Stream, client: u64, round: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stream, client, round))
}
