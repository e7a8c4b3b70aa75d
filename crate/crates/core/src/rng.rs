//! Seeded random streams.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the run
//! seed, a purpose tag, and the drawing party, so parties never need to
//! coordinate RNG state and a run replays identically in any mode.

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

use crate::comms::{PartyId, Role};

#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    Init,
    Shuffle { epoch: u64 },
    Mask,
    Keygen,
    Encrypt,
    Synthetic,
}

impl Purpose {
    fn tag(self) -> (u8, u64) {
        match self {
            Purpose::Init => (1, 0),
            Purpose::Shuffle { epoch } => (2, epoch),
            Purpose::Mask => (3, 0),
            Purpose::Keygen => (4, 0),
            Purpose::Encrypt => (5, 0),
            Purpose::Synthetic => (6, 0),
        }
    }
}

pub fn stream(seed: u64, purpose: Purpose, party: PartyId) -> ChaCha20Rng {
    let (tag, extra) = purpose.tag();
    let role = match party.role {
        Role::Master => 0u8,
        Role::Member => 1,
        Role::Arbiter => 2,
    };
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = tag;
    key[9] = role;
    key[12..16].copy_from_slice(&party.index.to_le_bytes());
    key[16..24].copy_from_slice(&extra.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}
