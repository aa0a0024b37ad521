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
use oskt_core::netgraph::{
    forward, id_loss, reference_spec, reference_teacher, tie_rows, triplet_hard_loss, Family, LayerKind, LayerParams,
    LayerSpec, Mode, Model, ModelSpec, NormKind, TeacherConfig,
};
use oskt_core::{Error, Graph, RngStream, Tensor};

fn dense_spec(in_dims: usize, out_rows: usize, classes: Option<usize>) -> ModelSpec {
    ModelSpec {
        family: Family::MlpLike,
        input_shape: vec![in_dims],
        layers: vec![LayerSpec::new("fc", LayerKind::Dense { in_dims, out_rows })],
        num_classes: classes,
    }
}

fn cnn_cfg(width: usize, blocks: usize) -> TeacherConfig {
    TeacherConfig::new(Family::CnnLike, width, blocks, 16, vec![3, 8, 8])
}

fn mlp_cfg(width: usize, blocks: usize) -> TeacherConfig {
    TeacherConfig::new(Family::MlpLike, width, blocks, 16, vec![12])
}

#[test]
fn identity_dense_layer_passes_input_through() {
    let mut m = Model::<f64>::init(dense_spec(3, 3, None), &RngStream::new(1)).unwrap();
    *m.weighted_mut(0).unwrap().0 = Tensor::eye(3);
    let x = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
    let (f, logits) = m.forward_eval(&x).unwrap();
    assert_eq!(f, x);
    assert!(logits.is_none());
}

#[test]
fn zero_head_gives_uniform_logits() {
    let mut m = Model::<f64>::init(dense_spec(4, 5, Some(6)), &RngStream::new(2)).unwrap();
    m.head = Some(Tensor::zeros(&[6, 5]));
    let x = Tensor::randn(&[3, 4], 1.0, &mut RngStream::new(3));
    let (_, logits) = m.forward_eval(&x).unwrap();
    let logits = logits.unwrap();
    for b in 0..3 {
        let row = logits.row(b);
        assert!(row.iter().all(|&v| v == row[0]));
    }
}

#[test]
fn reference_cnn_forward_has_declared_shapes() {
    let cfg = cnn_cfg(32, 4);
    let m: Model = reference_teacher(&cfg, &RngStream::new(4)).unwrap();
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut RngStream::new(5));
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let mut bound = m.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &m.spec, &mut bound, xv, mode).unwrap();
        assert_eq!(g.shape(out.features), &[4, 32]);
        assert_eq!(g.shape(out.logits.unwrap()), &[4, 16]);
        assert!(g.value(out.features).is_finite());
        assert!(g.value(out.logits.unwrap()).is_finite());
    }
}

#[test]
fn reference_cnn_rows_view_shapes() {
    let m: Model = reference_teacher(&cnn_cfg(32, 4), &RngStream::new(6)).unwrap();
    let mut seen = Vec::new();
    for (l, layer) in m.spec.layers.iter().enumerate() {
        if !layer.is_weighted() {
            assert!(matches!(m.rows_view(l), Err(Error::Contract(_))));
            continue;
        }
        let shape = m.rows_view(l).unwrap().shape();
        let expect = match layer.kind {
            LayerKind::Conv { in_dims, .. } => [32, in_dims, 9],
            LayerKind::Dense { .. } => [32, 32, 1],
            _ => unreachable!(),
        };
        assert_eq!(shape, expect, "{}", layer.name);
        seen.push(shape);
    }
    // stem + 2 convs per block + embed
    assert_eq!(seen.len(), 1 + 2 * 4 + 1);
    assert_eq!(seen[0], [32, 3, 9]);
}

#[test]
fn mlp_weighted_layers_are_followed_by_layer_norm() {
    let spec = reference_spec(&mlp_cfg(32, 4)).unwrap();
    let layers = &spec.layers;
    for (l, layer) in layers.iter().enumerate() {
        if !layer.is_weighted() {
            continue;
        }
        let next_norm = layers[l + 1..]
            .iter()
            .find(|n| n.is_weighted() || matches!(n.kind, LayerKind::Norm { .. }))
            .unwrap_or_else(|| panic!("{} has no following norm", layer.name));
        assert_eq!(
            next_norm.kind,
            LayerKind::Norm {
                norm: NormKind::Layer,
                dims: 32
            },
            "{}",
            layer.name
        );
    }
}

#[test]
fn smallest_teachers_run() {
    for cfg in [cnn_cfg(4, 1), mlp_cfg(4, 1)] {
        let m: Model = reference_teacher(&cfg, &RngStream::new(7)).unwrap();
        let mut shape = vec![2];
        shape.extend(&cfg.input_shape);
        let x = Tensor::randn(&shape, 1.0, &mut RngStream::new(8));
        let (f, p) = m.forward_eval(&x).unwrap();
        assert_eq!(f.shape(), &[2, 4]);
        assert_eq!(p.unwrap().shape(), &[2, 16]);
    }
    assert!(reference_spec(&cnn_cfg(3, 1)).is_err());
    assert!(reference_spec(&cnn_cfg(8, 0)).is_err());
}

#[test]
fn rows_and_cols_views() {
    let mut m = Model::<f32>::init(dense_spec(2, 3, None), &RngStream::new(9)).unwrap();
    *m.weighted_mut(0).unwrap().0 = Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
    let rows = m.rows_view(0).unwrap();
    assert_eq!(rows.shape(), [3, 2, 1]);
    assert_eq!(rows.row(1), &[3.0, 4.0]);
    let col = m.cols_view(0, 0).unwrap();
    assert_eq!(col.to_vec(), vec![1.0, 3.0, 5.0]);
    assert!(m.cols_view(0, 2).is_err());

    let conv = ModelSpec {
        family: Family::CnnLike,
        input_shape: vec![2, 5, 5],
        layers: vec![
            LayerSpec::new(
                "c",
                LayerKind::Conv {
                    in_dims: 2,
                    out_rows: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 0,
                },
            ),
            LayerSpec::new("p", LayerKind::GlobalPool),
        ],
        num_classes: None,
    };
    let m = Model::<f32>::init(conv, &RngStream::new(10)).unwrap();
    assert_eq!(m.rows_view(0).unwrap().shape(), [4, 2, 9]);
    assert_eq!(m.rows_view(0).unwrap().to_tensor().data(), m.weight(0).unwrap().data());
    assert_eq!(m.cols_view(0, 1).unwrap().shape(), [4, 9]);
}

#[test]
fn id_loss_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::zeros(&[2, 4]));
    let l = id_loss(&mut g, uniform, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let confident = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 1e6, 0.0]).unwrap());
    let l = id_loss(&mut g, confident, &[1]).unwrap();
    assert!(g.value(l).item().abs() < 1e-9);

    let hand = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
    let l = id_loss(&mut g, hand, &[1]).unwrap();
    assert!((g.value(l).item() - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 1.3133).abs() < 1e-4);

    assert!(matches!(id_loss(&mut g, hand, &[2]), Err(Error::Contract(_))));
}

#[test]
fn triplet_examples() {
    let mut g = Graph::<f64>::new();
    let apart = g.constant(Tensor::from_f64(&[4, 1], &[0.0, 0.0, 10.0, 10.0]).unwrap());
    let l = triplet_hard_loss(&mut g, apart, &[0, 0, 1, 1], 0.3).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let same = g.constant(Tensor::zeros(&[4, 2]));
    let l = triplet_hard_loss(&mut g, same, &[0, 0, 1, 1], 0.3).unwrap();
    assert!((g.value(l).item() - 0.3).abs() < 1e-6);

    let hand = g.constant(Tensor::from_f64(&[3, 1], &[0.0, 1.0, 2.0]).unwrap());
    let l = triplet_hard_loss(&mut g, hand, &[0, 0, 1], 0.3).unwrap();
    assert!((g.value(l).item() - 0.15).abs() < 1e-6);

    let lonely = g.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(
        triplet_hard_loss(&mut g, lonely, &[0, 1], 0.3),
        Err(Error::Contract(_))
    ));
}

#[test]
fn row_perturbation_touches_one_output_dimension() {
    let spec = dense_spec(5, 4, None);
    let m = Model::<f64>::init(spec, &RngStream::new(11)).unwrap();
    let x = Tensor::randn(&[3, 5], 1.0, &mut RngStream::new(12));
    let (base, _) = m.forward_eval(&x).unwrap();
    for j in 0..4 {
        let mut p = m.clone();
        for v in p.weighted_mut(0).unwrap().0.row_mut(j) {
            *v += 0.5;
        }
        let (out, _) = p.forward_eval(&x).unwrap();
        for b in 0..3 {
            for d in 0..4 {
                let changed = out.row(b)[d] != base.row(b)[d];
                assert_eq!(changed, d == j, "row {j} changed dim {d}");
            }
        }
    }
}

#[test]
fn column_perturbation_on_dead_input_is_invisible() {
    let m = Model::<f64>::init(dense_spec(5, 4, None), &RngStream::new(13)).unwrap();
    let mut x = Tensor::randn(&[3, 5], 1.0, &mut RngStream::new(14));
    for b in 0..3 {
        x.row_mut(b)[2] = 0.0;
    }
    let (base, _) = m.forward_eval(&x).unwrap();
    let mut p = m.clone();
    let w = p.weighted_mut(0).unwrap().0;
    for r in 0..4 {
        w.row_mut(r)[2] += 3.0;
    }
    assert_eq!(p.forward_eval(&x).unwrap().0, base);
}

#[test]
fn eval_forward_is_pure_and_train_updates_running_stats() {
    let mut m: Model<f64> = reference_teacher(&cnn_cfg(8, 1), &RngStream::new(15)).unwrap();
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut RngStream::new(16));
    let a = m.forward_eval(&x).unwrap();
    let b = m.forward_eval(&x).unwrap();
    assert_eq!(a, b);
    let before = m.clone();
    let mut g = Graph::new();
    let mut bound = m.bind(&mut g, false);
    let xv = g.constant(x.clone());
    forward(&mut g, &m.spec, &mut bound, xv, Mode::Eval).unwrap();
    m.absorb_running(&bound);
    assert_eq!(m, before);
    let mut g = Graph::new();
    let mut bound = m.bind(&mut g, false);
    let xv = g.constant(x);
    forward(&mut g, &m.spec, &mut bound, xv, Mode::Train).unwrap();
    m.absorb_running(&bound);
    assert_ne!(m, before);
}

#[test]
fn losses_decrease_on_separable_batch() {
    let spec = dense_spec(4, 6, Some(2));
    let mut m = Model::<f64>::init(spec, &RngStream::new(17)).unwrap();
    let labels = [0, 0, 1, 1];
    let x = Tensor::from_f64(
        &[4, 4],
        &[
            1.0, 0.2, 0.0, 0.1, 0.9, 0.0, 0.1, 0.0, 0.0, 0.1, 1.0, 0.2, 0.1, 0.0, 0.8, 0.0,
        ],
    )
    .unwrap();
    let (mut ids, mut tris) = (Vec::new(), Vec::new());
    for _ in 0..10 {
        let mut g = Graph::new();
        let mut bound = m.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &m.spec, &mut bound, xv, Mode::Train).unwrap();
        let id = id_loss(&mut g, out.logits.unwrap(), &labels).unwrap();
        let tri = triplet_hard_loss(&mut g, out.features, &labels, 5.0).unwrap();
        ids.push(g.value(id).item());
        tris.push(g.value(tri).item());
        assert!(ids.last().unwrap() >= &0.0 && tris.last().unwrap() >= &0.0);
        let total = g.add(id, tri).unwrap();
        let grads = g.backward(total).unwrap();
        let vars = bound.params();
        for (p, v) in m.params_mut().into_iter().zip(vars) {
            let gr = grads.get(v).unwrap();
            for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                *w -= 0.01 * d;
            }
        }
    }
    assert!(ids.windows(2).all(|w| w[1] < w[0]), "{ids:?}");
    assert!(tris.windows(2).all(|w| w[1] < w[0]), "{tris:?}");
}

#[test]
fn with_unit_widths_resizes_consistently() {
    let spec = reference_spec(&cnn_cfg(16, 2)).unwrap();
    let topo = spec.topology().unwrap();
    // trunk, conv1 x2, embed
    assert_eq!(topo.units.len(), 4);
    assert_eq!(topo.units[0].members.len(), 3);
    let widths: Vec<usize> = (0..topo.units.len()).map(|u| 4 + u).collect();
    let small = spec.with_unit_widths(&widths).unwrap();
    let st = small.topology().unwrap();
    assert_eq!(st.unit_widths(), widths);
    assert_eq!(small.embedding_dim().unwrap(), widths[topo.feature_unit]);
    let m: Model = Model::init(small, &RngStream::new(18)).unwrap();
    let (f, _) = m
        .forward_eval(&Tensor::randn(&[2, 3, 8, 8], 1.0, &mut RngStream::new(19)))
        .unwrap();
    assert_eq!(f.shape(), &[2, widths[topo.feature_unit]]);
}

#[test]
fn topology_rejects_bad_networks() {
    let mut spec = dense_spec(3, 4, None);
    spec.layers.push(LayerSpec::new(
        "fc2",
        LayerKind::Dense {
            in_dims: 5,
            out_rows: 2,
        },
    ));
    assert!(matches!(spec.topology(), Err(Error::Dimension(_))));

    let mut spec = dense_spec(3, 4, None);
    spec.layers[0].residual_group = Some(1);
    spec.layers.push(
        LayerSpec::new(
            "fc2",
            LayerKind::Dense {
                in_dims: 4,
                out_rows: 5,
            },
        )
        .in_group(1),
    );
    assert!(matches!(spec.topology(), Err(Error::Contract(_))));

    let mut spec = dense_spec(3, 4, None);
    spec.layers.insert(0, LayerSpec::new("s", LayerKind::Save));
    spec.layers.push(LayerSpec::new("add", LayerKind::ResidualAdd));
    assert!(matches!(spec.topology(), Err(Error::Dimension(_))));

    let m = Model::<f32>::init(dense_spec(3, 4, None), &RngStream::new(20)).unwrap();
    assert!(matches!(
        m.forward_eval(&Tensor::zeros(&[2, 4])),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn tie_rows_duplicates_rows_and_norms() {
    let mut m: Model<f64> = reference_teacher(&cnn_cfg(8, 1), &RngStream::new(21)).unwrap();
    let topo = m.spec.topology().unwrap();
    for l in 0..m.layers.len() {
        if let LayerParams::Norm(n) = &mut m.layers[l] {
            n.gamma = Tensor::randn(&[8], 1.0, &mut RngStream::new(l as u64));
        }
    }
    let assign: Vec<Vec<usize>> = topo
        .units
        .iter()
        .map(|u| (0..u.rows).map(|r| r % 3).collect())
        .collect();
    tie_rows(&mut m, &assign).unwrap();
    let stem = m.rows_view(0).unwrap();
    assert_eq!(stem.row(0), stem.row(3));
    assert_ne!(stem.row(0), stem.row(1));
    let bn = m.norm(1).unwrap();
    assert_eq!(bn.gamma.data()[1], bn.gamma.data()[4]);
}

#[test]
fn named_tensors_round_trip() {
    let m: Model<f32> = reference_teacher(&cnn_cfg(8, 1), &RngStream::new(22)).unwrap();
    let map = m
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("teacher.{n}"), t.clone()))
        .collect();
    let back = Model::from_named(m.spec.clone(), &map, "teacher.").unwrap();
    assert_eq!(back, m);
    assert!(Model::<f32>::from_named(m.spec.clone(), &map, "").is_err());
}
