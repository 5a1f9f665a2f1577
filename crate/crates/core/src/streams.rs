//! Seeded random streams.
//!
//! Every consumer (a client, the server, the initializer) owns its own
//! ChaCha stream derived from a base seed and a stable tag, so results do not
//! depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint even when they
/// share a base seed and an id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Data,
    Training,
    Server,
    Init,
    Probe,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Data => 0x6461_7461,
            Domain::Training => 0x7472_6169_6e,
            Domain::Server => 0x7365_7276,
            Domain::Init => 0x696e_6974,
            Domain::Probe => 0x7072_6f62,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `id` under `domain`: `seed ⊕ hash(domain, id)`.
pub fn stream(seed: u64, domain: Domain, id: u64) -> Stream {
    let key = seed ^ mix64(domain.tag() ^ mix64(id));
    ChaCha8Rng::seed_from_u64(key)
}
