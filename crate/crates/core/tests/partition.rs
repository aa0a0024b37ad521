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
mod common;

use common::*;
use oskt_core::netgraph::{reference_teacher, Model};
use oskt_core::partition::{cluster_model, kmeans, unit_rows, Metric, DEFAULT_MAX_ITERS};
use oskt_core::{Error, RngStream, Tensor};
use proptest::prelude::*;

/// Rows around `k` random prototypes with within-spread at most a tenth of
/// the smallest prototype separation.
fn planted_rows(k: usize, per: usize, dim: usize, seed: u64, metric: Metric) -> (Vec<f64>, Vec<usize>) {
    let mut rng = RngStream::new(seed);
    let protos = Tensor::<f64>::randn(&[k, dim], 1.0, &mut rng);
    let mut sep = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            sep = sep.min(metric.distance(protos.row(a), protos.row(b)));
        }
    }
    let mut shrink = 1.0;
    loop {
        let mut r = rng.clone();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..k * per {
            let c = (i * 7 + 3) % k;
            let noise = Tensor::<f64>::randn(&[dim], 1.0, &mut r);
            let scale = shrink
                * match metric {
                    Metric::Euclidean => 0.05 * sep / (dim as f64).sqrt(),
                    Metric::Cosine => 0.02 * sep.sqrt() / (dim as f64).sqrt(),
                };
            data.extend(protos.row(c).iter().zip(noise.data()).map(|(p, n)| p + scale * n));
            truth.push(c);
        }
        let rows: Vec<&[f64]> = data.chunks(dim).collect();
        let mut spread: f64 = 0.0;
        let mut between = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d = metric.distance(rows[i], rows[j]);
                if truth[i] == truth[j] {
                    spread = spread.max(d);
                } else {
                    between = between.min(d);
                }
            }
        }
        if between / spread >= 10.0 {
            return (data, truth);
        }
        shrink *= 0.5;
    }
}

#[test]
fn planted_groups_are_recovered_for_both_metrics() {
    for metric in [Metric::Euclidean, Metric::Cosine] {
        for seed in 0..20 {
            let (data, truth) = planted_rows(5, 6, 16, seed, metric);
            let r = kmeans(&data, 16, 5, metric, &RngStream::new(seed + 100), DEFAULT_MAX_ITERS).unwrap();
            assert!(same_partition(&r.assignment, &truth), "{metric:?} seed {seed}");
        }
    }
}

#[test]
fn identical_rows_one_cluster() {
    let mut m: Model<f64> = reference_teacher(&cnn_cfg(8, 1, 4), &RngStream::new(1)).unwrap();
    let topo = m.spec.topology().unwrap();
    let assign: Vec<Vec<usize>> = topo.units.iter().map(|u| vec![0; u.rows]).collect();
    oskt_core::netgraph::tie_rows(&mut m, &assign).unwrap();
    let p = cluster_model(
        &m,
        &vec![1; topo.units.len()],
        Metric::Euclidean,
        &RngStream::new(2),
        100,
    )
    .unwrap();
    for unit in &p.units {
        assert_eq!(unit.sizes, vec![8]);
        for c in &unit.centers {
            assert_eq!(c.rows.data(), m.rows_view(c.layer).unwrap().row(0));
            assert_eq!(c.bias.data()[0], m.bias(c.layer).unwrap().data()[0]);
        }
    }
}

#[test]
fn residual_group_members_share_assignment() {
    let m: Model<f32> = reference_teacher(&cnn_cfg(16, 3, 4), &RngStream::new(3)).unwrap();
    let topo = m.spec.topology().unwrap();
    let p = cluster_model(
        &m,
        &vec![5; topo.units.len()],
        Metric::Euclidean,
        &RngStream::new(4),
        100,
    )
    .unwrap();
    let trunk = &p.units[0];
    assert_eq!(trunk.members.len(), 4);
    for &l in &trunk.members {
        assert!(std::ptr::eq(p.unit_of_layer(l).unwrap(), trunk));
    }
    assert_eq!(trunk.centers.len(), 4);
}

#[test]
fn planted_teacher_is_recovered() {
    for (cfg, metric) in [
        (cnn_cfg(16, 2, 4), Metric::Euclidean),
        (mlp_cfg(16, 2, 4), Metric::Cosine),
    ] {
        for seed in 0..5 {
            let topo = oskt_core::netgraph::reference_spec(&cfg).unwrap().topology().unwrap();
            let k: Vec<usize> = (0..topo.units.len()).map(|u| 3 + u % 4).collect();
            let (m, truth) = planted_teacher::<f64>(&cfg, &k, seed);
            let p = cluster_model(&m, &k, metric, &RngStream::new(seed), 100).unwrap();
            for (unit, t) in p.units.iter().zip(&truth) {
                assert!(same_partition(&unit.assignment, t));
            }
        }
    }
}

#[test]
fn chain_width_bounds_checked() {
    let m: Model<f32> = reference_teacher(&cnn_cfg(8, 1, 4), &RngStream::new(5)).unwrap();
    let n = m.spec.topology().unwrap().units.len();
    let err = cluster_model(&m, &vec![9; n], Metric::Euclidean, &RngStream::new(0), 10);
    assert!(matches!(err, Err(Error::Contract(_))));
    assert!(cluster_model(&m, &vec![4; n - 1], Metric::Euclidean, &RngStream::new(0), 10).is_err());
}

#[test]
fn unit_rows_append_bias() {
    let m: Model<f32> = reference_teacher(&mlp_cfg(4, 1, 2), &RngStream::new(6)).unwrap();
    let (data, dim) = unit_rows(&m, &[0]).unwrap();
    assert_eq!(dim, 13);
    assert_eq!(data.len(), 4 * 13);
}

#[test]
fn clustering_is_reproducible() {
    let m: Model<f32> = reference_teacher(&cnn_cfg(16, 2, 4), &RngStream::new(7)).unwrap();
    let n = m.spec.topology().unwrap().units.len();
    let a = cluster_model(&m, &vec![6; n], Metric::Cosine, &RngStream::new(8), 100).unwrap();
    let b = cluster_model(&m, &vec![6; n], Metric::Cosine, &RngStream::new(8), 100).unwrap();
    assert_eq!(a, b);
}

fn rows_strategy() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
    (2usize..20, 1usize..5).prop_flat_map(|(n, dim)| (prop::collection::vec(-5.0f64..5.0, n * dim), Just(dim), 1..=n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sse_never_increases((data, dim, k) in rows_strategy(), seed in 0u64..1000) {
        let r = kmeans(&data, dim, k, Metric::Euclidean, &RngStream::new(seed), 100).unwrap();
        for w in r.sse_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", r.sse_trace);
        }
    }

    #[test]
    fn no_empty_clusters((data, dim, k) in rows_strategy(), seed in 0u64..1000, cosine in any::<bool>()) {
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let r = kmeans(&data, dim, k, metric, &RngStream::new(seed), 100).unwrap();
        prop_assert_eq!(r.sizes.len(), k);
        prop_assert!(r.sizes.iter().all(|&s| s >= 1));
        prop_assert_eq!(r.sizes.iter().sum::<usize>(), data.len() / dim);
    }

    #[test]
    fn row_order_does_not_matter((data, dim, k) in rows_strategy(), seed in 0u64..1000, shift in 0usize..20) {
        let n = data.len() / dim;
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == n });
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].to_vec()).collect();
        let a = kmeans(&data, dim, k, Metric::Euclidean, &RngStream::new(seed), 100).unwrap();
        let b = kmeans(&permuted, dim, k, Metric::Euclidean, &RngStream::new(seed), 100).unwrap();
        let back: Vec<usize> = {
            let mut v = vec![0; n];
            for (pos, &orig) in perm.iter().enumerate() {
                v[orig] = b.assignment[pos];
            }
            v
        };
        prop_assert!(same_partition(&a.assignment, &back));
    }
}
