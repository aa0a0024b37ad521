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
use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{contract_err, Result};
use crate::numerics::{RngStream, Scalar, Tensor};
use crate::train::BatchSource;

use super::data::{Split, ToyReIDDataset};

/// Batches of `p` identities with `k` samples each.
///
/// Each epoch cuts every identity's shuffled train samples into runs of
/// `k` (dropping the remainder) and deals the runs out in shuffled order,
/// never placing one identity twice in a batch. No sample repeats within an
/// epoch.
#[derive(Clone, Debug)]
pub struct PkSampler<'a, T: Scalar> {
    data: &'a ToyReIDDataset<T>,
    p: usize,
    k: usize,
    rng: RngStream,
    by_id: BTreeMap<usize, Vec<usize>>,
    pending: Vec<(usize, Vec<usize>)>,
    epoch: usize,
}

impl<'a, T: Scalar> PkSampler<'a, T> {
    pub fn new(data: &'a ToyReIDDataset<T>, p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 1 || k < 1 {
            return Err(contract_err!("P and K must be positive"));
        }
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in data.indices(Split::Train) {
            by_id.entry(data.ids[i]).or_default().push(i);
        }
        let eligible = by_id.values().filter(|v| v.len() >= k).count();
        if eligible < p {
            return Err(contract_err!(
                "only {} identities have {} train samples, batch needs {}",
                eligible,
                k,
                p
            ));
        }
        by_id.retain(|_, v| v.len() >= k);
        Ok(Self {
            data,
            p,
            k,
            rng: RngStream::new(seed),
            by_id,
            pending: Vec::new(),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn refill(&mut self) {
        let mut r = self.rng.derive(self.epoch as u64);
        self.epoch += 1;
        let mut runs = Vec::new();
        for (&id, samples) in &self.by_id {
            let mut s = samples.clone();
            s.shuffle(&mut r);
            for chunk in s.chunks_exact(self.k) {
                runs.push((id, chunk.to_vec()));
            }
        }
        runs.shuffle(&mut r);
        self.pending = runs;
    }

    fn take_batch(&mut self) -> Option<Vec<(usize, Vec<usize>)>> {
        let mut picked = Vec::with_capacity(self.p);
        let mut used = Vec::with_capacity(self.p);
        for (pos, (id, _)) in self.pending.iter().enumerate() {
            if !used.contains(id) {
                used.push(*id);
                picked.push(pos);
                if picked.len() == self.p {
                    break;
                }
            }
        }
        if picked.len() < self.p {
            return None;
        }
        let mut batch: Vec<_> = picked.into_iter().rev().map(|pos| self.pending.remove(pos)).collect();
        batch.reverse();
        Some(batch)
    }

    /// Sample indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let runs = match self.take_batch() {
            Some(b) => b,
            None => {
                self.refill();
                self.take_batch().expect("a fresh epoch holds at least one batch")
            }
        };
        runs.into_iter().flat_map(|(_, s)| s).collect()
    }
}

impl<T: Scalar> BatchSource<T> for PkSampler<'_, T> {
    fn next_batch(&mut self) -> Result<(Tensor<T>, Vec<usize>)> {
        let idx = self.next_indices();
        let labels = idx.iter().map(|&i| self.data.ids[i]).collect();
        Ok((self.data.batch(&idx), labels))
    }

    fn batches_per_epoch(&self) -> usize {
        let runs: usize = self.by_id.values().map(|v| v.len() / self.k).sum();
        (runs / self.p).max(1)
    }
}
