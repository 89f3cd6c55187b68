//! Named, independently seeded random streams.
//!
//! Every stochastic draw in training and sampling goes through one of these
//! streams so a single source of randomness can be replayed in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Stream names used by the trainer and sampler.
pub mod streams {
    pub const INIT: &str = "init";
    pub const DATA: &str = "data";
    pub const DIFFUSION_T: &str = "diffusion-t";
    pub const DIFFUSION_NOISE: &str = "diffusion-noise";
    pub const SAMPLING_NOISE: &str = "sampling-noise";
}

/// Derive the 32-byte ChaCha seed of a named stream from a master seed.
pub fn derive_seed(master: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}

/// A seeded ChaCha8 stream with a serializable position.
#[derive(Debug, Clone)]
pub struct RngStream {
    name: String,
    rng: ChaCha8Rng,
}

/// Serialized form of an [`RngStream`]; restoring it resumes the exact sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    pub seed: String,
    pub word_pos: String,
}

impl RngStream {
    pub fn new(master: u64, name: &str) -> Self {
        Self {
            name: name.to_string(),
            rng: ChaCha8Rng::from_seed(derive_seed(master, name)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal() as f32).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            name: self.name.clone(),
            seed: hex::encode(self.rng.get_seed()),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let bytes = hex::decode(&state.seed)
            .map_err(|e| Error::config(format!("rng seed for `{}`: {e}", state.name)))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::config(format!("rng seed for `{}` must be 32 bytes", state.name)))?;
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|e| Error::config(format!("rng position for `{}`: {e}", state.name)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(Self {
            name: state.name.clone(),
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trip_resumes_sequence() {
        let mut a = RngStream::new(7, streams::DATA);
        for _ in 0..13 {
            a.normal();
        }
        let mut b = RngStream::from_state(&a.state()).unwrap();
        for _ in 0..50 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngStream::new(7, streams::DATA);
        let mut b = RngStream::new(7, streams::DIFFUSION_T);
        assert_ne!(a.uniform(), b.uniform());
    }
}
