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
//! Single-thread against default-pool timings for the data-parallel paths.
//!
//! Built without the `parallel` feature both variants run the sequential
//! fallback, which gives the baseline for comparison.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use oskt_core::benchdata::{evaluate_embeddings, Embedded};
use oskt_core::netgraph::{reference_teacher, Family, TeacherConfig};
use oskt_core::numerics::kernels::gemm;
use oskt_core::partition::{cluster_model, Metric};
use oskt_core::{RngStream, Tensor};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("1-thread", one), ("default", all)]
}

fn bench_gemm(c: &mut Criterion) {
    let mut rng = RngStream::new(0);
    let n = 192;
    let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
    let mut group = c.benchmark_group("gemm");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| bench.iter(|| gemm(a.data(), b.data(), n, n, n)))
        });
    }
    group.finish();
}

fn bench_clustering(c: &mut Criterion) {
    let cfg = TeacherConfig::new(Family::CnnLike, 64, 2, 16, vec![3, 16, 16]);
    let teacher = reference_teacher::<f32>(&cfg, &RngStream::new(1)).unwrap();
    let units = teacher.spec.topology().unwrap().units.len();
    let widths = vec![16; units];
    let mut group = c.benchmark_group("cluster_model");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| {
                bench.iter(|| cluster_model(&teacher, &widths, Metric::Euclidean, &RngStream::new(2), 100).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let mut rng = RngStream::new(3);
    let (nq, ng, dim) = (256, 2048, 64);
    let q = Tensor::<f64>::randn(&[nq, dim], 1.0, &mut rng);
    let g = Tensor::<f64>::randn(&[ng, dim], 1.0, &mut rng);
    let qi: Vec<usize> = (0..nq).map(|i| i % 64).collect();
    let gi: Vec<usize> = (0..ng).map(|i| i % 64).collect();
    let (qv, gv) = (vec![0; nq], vec![1; ng]);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            pool.install(|| {
                bench.iter(|| {
                    evaluate_embeddings(
                        Embedded {
                            features: q.data(),
                            dim,
                            ids: &qi,
                            views: &qv,
                        },
                        Embedded {
                            features: g.data(),
                            dim,
                            ids: &gi,
                            views: &gv,
                        },
                    )
                    .unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_clustering, bench_eval);
criterion_main!(benches);
