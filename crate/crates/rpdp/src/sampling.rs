//! Deterministic, seed-derived randomness for both sampling stages.
//!
//! Every logical task (budget draw, client selection, one client's local
//! step, ...) derives its own stream from the master seed and a label path,
//! so results do not depend on scheduling or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One component of a stream's label path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label<'a> {
    Text(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Text(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(i: u64) -> Self {
        Label::Index(i)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A keyed random stream with a draw counter. Equal keys produce identical
/// draw sequences on every platform; distinct label paths give streams that
/// are independent for simulation purposes.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
    position: u64,
}

impl RngStream {
    /// Stable FNV-1a digest of the master seed and label path, expanded to
    /// a full ChaCha key. Label kinds are tagged and strings are
    /// length-prefixed so paths cannot collide by concatenation.
    pub fn derive(master_seed: u64, labels: &[Label<'_>]) -> Self {
        let mut h = FNV_OFFSET;
        let mut absorb = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        absorb(&master_seed.to_le_bytes());
        for label in labels {
            match label {
                Label::Text(s) => {
                    absorb(&[0x01]);
                    absorb(&(s.len() as u64).to_le_bytes());
                    absorb(s.as_bytes());
                }
                Label::Index(i) => {
                    absorb(&[0x02]);
                    absorb(&i.to_le_bytes());
                }
            }
        }
        let key = h;
        let mut state = h;
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            key,
            rng: ChaCha8Rng::from_seed(seed),
            position: 0,
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of draws taken so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.position += 1;
        self.rng.random()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.position += 1;
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in 0..n.
    pub fn index(&mut self, n: usize) -> usize {
        self.position += 1;
        self.rng.random_range(0..n)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Convenience wrapper over [`RngStream::derive`].
pub fn derive_stream(master_seed: u64, labels: &[Label<'_>]) -> RngStream {
    RngStream::derive(master_seed, labels)
}

/// Poisson selection: index i is included iff an independent Bernoulli
/// draw with probability `probs[i]` succeeds. Returns the selected indices
/// in increasing order.
pub fn poisson_select(probs: &[f64], stream: &mut RngStream) -> Result<Vec<usize>> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p) || p.is_nan()) {
        return Err(Error::Domain(format!("sampling probability {p} outside [0, 1]")));
    }
    let mut selected = Vec::new();
    for (i, &p) in probs.iter().enumerate() {
        if stream.uniform() < p {
            selected.push(i);
        }
    }
    Ok(selected)
}
