//! Seed discipline: every random draw in a run comes from a stream derived
//! from the master seed, a stream tag, and a counter (usually the step
//! index), so any step can be replayed without the generator state of the
//! steps before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Noise = 3,
    CaEps = 4,
    Eval = 5,
}

pub fn stream_rng(master: u64, stream: Stream, counter: u64) -> Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&counter.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
