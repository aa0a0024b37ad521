// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based split-mix stream.
///
/// Draw `i` is a pure function of `(seed, i)`, so a stream reproduces
/// exactly on every platform. Independent streams are obtained with
/// [`RngStream::derive`] rather than by sharing one generator, which makes
/// the draws a module sees independent of what other modules consumed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// A fresh stream keyed by `(self.seed, stream_id)`. The parent counter is
    /// not consulted.
    pub fn derive(&self, stream_id: u64) -> Self {
        let seed = mix64(self.seed ^ mix64(stream_id.wrapping_add(1).wrapping_mul(GOLDEN)));
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_word(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_word() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_word()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_word().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_word(), b.next_word());
        }
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let base = RngStream::new(7);
        let mut advanced = base.clone();
        for _ in 0..10 {
            advanced.next_word();
        }
        assert_eq!(base.derive(3), advanced.derive(3));
        assert_ne!(base.derive(3).next_word(), base.derive(4).next_word());
    }

    #[test]
    fn known_first_word() {
        // splitmix64 with state seed + GOLDEN, i.e. the reference sequence for seed 0.
        let mut s = RngStream::new(0);
        assert_eq!(s.next_word(), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn uniform_draws_in_range() {
        let mut s = RngStream::new(1);
        for _ in 0..1000 {
            let x: f64 = s.random();
            assert!((0.0..1.0).contains(&x));
        }
    }
}
