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
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::netgraph::Model;
use crate::numerics::Scalar;
use crate::parallel::*;

use super::data::{Split, ToyReIDDataset};

/// Ranks reported in the CMC curve.
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `(k, accuracy)` for every `k` in [`CMC_RANKS`].
    pub cmc: Vec<(usize, f64)>,
    pub per_query_ap: Vec<f64>,
    /// Queries without any valid gallery match.
    pub dropped: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Labelled embeddings, `[n, dim]` row-major.
#[derive(Clone, Copy, Debug)]
pub struct Embedded<'a> {
    pub features: &'a [f64],
    pub dim: usize,
    pub ids: &'a [usize],
    pub views: &'a [usize],
}

fn normalized(e: &Embedded) -> Vec<f64> {
    let mut out = e.features.to_vec();
    for row in out.chunks_mut(e.dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Retrieval metrics with cosine ranking.
///
/// Gallery entries with the query's identity and view are ignored; ties
/// keep gallery order.
pub fn evaluate_embeddings(query: Embedded, gallery: Embedded) -> Result<EvalReport> {
    if query.dim != gallery.dim || query.features.len() != query.ids.len() * query.dim {
        return Err(dim_err!("query and gallery embeddings disagree"));
    }
    if gallery.ids.is_empty() {
        return Err(contract_err!("gallery is empty"));
    }
    let (q, g) = (normalized(&query), normalized(&gallery));
    let dim = query.dim;
    let results: Vec<Option<(f64, usize)>> = (0..query.ids.len())
        .into_par_iter()
        .map(|qi| {
            let qv = &q[qi * dim..(qi + 1) * dim];
            let mut scored: Vec<(usize, f64)> = (0..gallery.ids.len())
                .filter(|&gi| !(gallery.ids[gi] == query.ids[qi] && gallery.views[gi] == query.views[qi]))
                .map(|gi| {
                    let gv = &g[gi * dim..(gi + 1) * dim];
                    (gi, qv.iter().zip(gv).map(|(a, b)| a * b).sum::<f64>())
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let relevant: Vec<bool> = scored.iter().map(|(gi, _)| gallery.ids[*gi] == query.ids[qi]).collect();
            let first = relevant.iter().position(|&r| r)?;
            Some((average_precision(&relevant), first))
        })
        .collect();
    let kept: Vec<(f64, usize)> = results.iter().flatten().copied().collect();
    let dropped = results.len() - kept.len();
    if dropped > 0 {
        log::warn!("{} queries have no valid gallery match and were dropped", dropped);
    }
    if kept.is_empty() {
        return Err(contract_err!("no query has a valid gallery match"));
    }
    let n = kept.len() as f64;
    let per_query_ap: Vec<f64> = kept.iter().map(|(ap, _)| *ap).collect();
    Ok(EvalReport {
        map: per_query_ap.iter().sum::<f64>() / n,
        cmc: CMC_RANKS
            .iter()
            .map(|&k| (k, kept.iter().filter(|(_, first)| *first < k).count() as f64 / n))
            .collect(),
        per_query_ap,
        dropped,
    })
}

/// Embeds the query and gallery splits with `model` and scores retrieval.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &ToyReIDDataset<T>) -> Result<EvalReport> {
    let embed = |split| -> Result<(Vec<f64>, usize, Vec<usize>, Vec<usize>)> {
        let idx = data.indices(split);
        let f = model.embed(&data.batch(&idx), 256)?;
        let dim = f.shape()[1];
        Ok((
            f.to_f64_vec(),
            dim,
            idx.iter().map(|&i| data.ids[i]).collect(),
            idx.iter().map(|&i| data.views[i]).collect(),
        ))
    };
    let (qf, dim, qi, qv) = embed(Split::Query)?;
    let (gf, _, gi, gv) = embed(Split::Gallery)?;
    evaluate_embeddings(
        Embedded {
            features: &qf,
            dim,
            ids: &qi,
            views: &qv,
        },
        Embedded {
            features: &gf,
            dim,
            ids: &gi,
            views: &gv,
        },
    )
}
