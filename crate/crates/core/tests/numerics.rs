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
use oskt_core::numerics::{backward_count, check_gradients, Graph, RngStream, Tensor, Var};
use oskt_core::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut RngStream::new(seed))
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn rand_off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(Tensor::eye(2));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let b = g.constant(t(&[2, 1], &[0.0, 5.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[0.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let bad = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
    assert!(matches!(g.matmul(a, bad), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.0));

    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);

    // kernel larger than the padded input
    let big = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, big, None, 1, 0), Err(Error::Dimension(_))));
    assert!(g.conv2d(x, k, None, 0, 0).is_err());
}

#[test]
fn conv2d_output_geometry() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 7, 5]));
    let k = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    // floor((7+2-3)/2)+1 = 4, floor((5+2-3)/2)+1 = 3
    assert_eq!(g.shape(y), &[2, 4, 4, 3]);
}

#[test]
fn zero_kernel_gradient_is_summed_patches() {
    let input = rand(&[2, 1, 3, 3], 11);
    let mut g = Graph::<f64>::new();
    let x = g.constant(input.clone());
    let k = g.param(Tensor::zeros(&[1, 1, 2, 2]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let dk = grads.get(k).unwrap();
    let xv = input.data();
    for ky in 0..2 {
        for kx in 0..2 {
            let mut expect = 0.0;
            for b in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        expect += xv[b * 9 + (oy + ky) * 3 + ox + kx];
                    }
                }
            }
            assert!((dk.data()[ky * 2 + kx] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let w = g.param(Tensor::scalar(3.0));
    let l = g.square(w);
    assert_eq!(g.backward(l).unwrap().get(w).unwrap().data(), &[6.0]);

    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let l = g.sum(sq);
    assert_eq!(g.backward(l).unwrap().get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unreached_parameters_get_zero() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let l = g.sum(w);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn backward_passes_are_counted_per_thread() {
    let before = backward_count();
    let mut g = Graph::<f64>::new();
    let w = g.param(Tensor::scalar(1.0));
    let l = g.square(w);
    g.backward(l).unwrap();
    assert_eq!(backward_count(), before + 1);
}

#[test]
fn two_layer_composition_matches_finite_differences() {
    let x = rand(&[4, 3], 1);
    let w1 = rand(&[5, 3], 2);
    let b1 = rand(&[5], 3);
    let w2 = rand(&[2, 5], 4);
    let report = check_gradients(
        |g, p| {
            let x = g.constant(x.clone());
            let h = g.linear(x, p[0], Some(p[1]))?;
            let h = g.gelu(h);
            let y = g.linear(h, p[2], None)?;
            let s = g.square(y);
            g.mean(s)
        },
        &[w1, b1, w2],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checker_on_linear_function_is_exact() {
    let w = rand(&[6], 5);
    let report = check_gradients(
        |g, p| {
            let s = g.scale(p[0], 3.0);
            Ok(g.sum(s))
        },
        &[w],
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
    assert_eq!(report.checked, 6);
}

#[test]
fn checker_on_sum_of_squares() {
    let w = rand(&[8], 6);
    let report = check_gradients(
        |g, p| {
            let s = g.square(p[0]);
            Ok(g.sum(s))
        },
        &[w],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn checker_with_relu_away_from_kinks() {
    let w = rand_off_zero(&[10], 7);
    let report = check_gradients(
        |g, p| {
            let r = g.relu(p[0]);
            let s = g.square(r);
            Ok(g.sum(s))
        },
        &[w],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checker_reports_non_finite_objective() {
    let w = t(&[1], &[1.0]);
    let err = check_gradients(
        |g, p| {
            let s = g.scale(p[0], f64::INFINITY);
            Ok(g.sum(s))
        },
        &[w],
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

fn assert_grad_ok<F>(name: &str, f: F, params: &[Tensor<f64>], eps: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> oskt_core::Result<Var>,
{
    let report = check_gradients(f, params, eps).unwrap();
    assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
}

/// Weighted sum so every output coordinate has a distinct sensitivity.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> oskt_core::Result<Var> {
    let w = g.constant(rand(g.shape(y), seed));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

#[test]
fn every_op_matches_finite_differences() {
    assert_grad_ok(
        "matmul",
        |g, p| {
            let y = g.matmul(p[0], p[1])?;
            probe(g, y, 100)
        },
        &[rand(&[3, 4], 1), rand(&[4, 2], 2)],
        1e-5,
    );
    assert_grad_ok(
        "conv2d",
        |g, p| {
            let y = g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?;
            probe(g, y, 101)
        },
        &[rand(&[2, 2, 5, 5], 3), rand(&[3, 2, 3, 3], 4), rand(&[3], 5)],
        1e-5,
    );
    assert_grad_ok(
        "add/sub/mul/scale",
        |g, p| {
            let a = g.add(p[0], p[1])?;
            let s = g.sub(a, p[1])?;
            let m = g.mul(s, p[1])?;
            let y = g.scale(m, 0.7);
            probe(g, y, 102)
        },
        &[rand(&[6], 6), rand(&[6], 7)],
        1e-5,
    );
    assert_grad_ok(
        "mean/square",
        |g, p| {
            let s = g.square(p[0]);
            g.mean(s)
        },
        &[rand(&[7], 8)],
        1e-5,
    );
    assert_grad_ok(
        "relu",
        |g, p| {
            let y = g.relu(p[0]);
            probe(g, y, 103)
        },
        &[rand_off_zero(&[12], 9)],
        1e-4,
    );
    assert_grad_ok(
        "gelu",
        |g, p| {
            let y = g.gelu(p[0]);
            probe(g, y, 104)
        },
        &[rand(&[12], 10)],
        1e-5,
    );
    assert_grad_ok(
        "reshape+pool",
        |g, p| {
            let r = g.reshape(p[0], &[2, 3, 2, 2])?;
            let y = g.global_avg_pool(r)?;
            probe(g, y, 105)
        },
        &[rand(&[24], 11)],
        1e-5,
    );
    assert_grad_ok(
        "batch_norm_train",
        |g, p| {
            let (y, _, _) = g.batch_norm_train(p[0], p[1], p[2], 1e-5)?;
            probe(g, y, 106)
        },
        &[rand(&[4, 3, 2, 2], 12), rand(&[3], 13), rand(&[3], 14)],
        1e-5,
    );
    assert_grad_ok(
        "batch_norm_eval",
        |g, p| {
            let y = g.batch_norm_eval(p[0], p[1], p[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            probe(g, y, 107)
        },
        &[rand(&[4, 3], 15), rand(&[3], 16), rand(&[3], 17)],
        1e-5,
    );
    assert_grad_ok(
        "layer_norm",
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-6)?;
            probe(g, y, 108)
        },
        &[rand(&[3, 5], 18), rand(&[5], 19), rand(&[5], 20)],
        1e-5,
    );
    assert_grad_ok(
        "cross_entropy",
        |g, p| g.cross_entropy(p[0], &[1, 0, 3]),
        &[rand(&[3, 4], 21)],
        1e-5,
    );
    assert_grad_ok(
        "triplet_hard",
        |g, p| g.triplet_hard(p[0], &[0, 0, 1, 1, 2, 2], 2.0),
        &[rand(&[6, 3], 22)],
        1e-5,
    );
    assert_grad_ok(
        "gather_rows",
        |g, p| {
            let y = g.gather_rows(p[0], &[2, 0, 2, 1])?;
            probe(g, y, 109)
        },
        &[rand(&[3, 2], 23)],
        1e-5,
    );
    assert_grad_ok(
        "column_sum",
        |g, p| {
            let y = g.column_sum(p[0], &[1, 0, 1], &[vec![0, 3], vec![1], vec![2]])?;
            probe(g, y, 110)
        },
        &[rand(&[2, 4, 3], 24)],
        1e-5,
    );
    assert_grad_ok(
        "segment_mean",
        |g, p| {
            let y = g.segment_mean(p[0], &[vec![0, 2, 4], vec![1], vec![3]])?;
            probe(g, y, 111)
        },
        &[rand(&[5], 25)],
        1e-5,
    );
}

#[test]
fn backward_is_linear_in_the_loss() {
    // Sum of per-sample gradients equals the gradient of the summed loss.
    let x = rand(&[4, 3], 30);
    let w = rand(&[2, 3], 31);
    let grad_of = |rows: &[usize]| {
        let mut g = Graph::<f64>::new();
        let wv = g.param(w.clone());
        let xv = g.constant(x.clone());
        let xs = g.gather_rows(xv, rows).unwrap();
        let y = g.linear(xs, wv, None).unwrap();
        let s = g.square(y);
        let l = g.sum(s);
        g.backward(l).unwrap().get(wv).unwrap().clone()
    };
    let total = grad_of(&[0, 1, 2, 3]);
    let mut acc = Tensor::<f64>::zeros(&[2, 3]);
    for i in 0..4 {
        for (a, b) in acc.data_mut().iter_mut().zip(grad_of(&[i]).data()) {
            *a += b;
        }
    }
    assert!(total.max_abs_diff(&acc) < 1e-12);
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = RngStream::new(99);
        let x = Tensor::<f32>::randn(&[4, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let kv = g.constant(k);
        let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
        g.value(y).clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
