use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};
use crate::graph::{batch_graphs, build_from_rows, PropagationGraph};
use crate::tabular::Row;

const SIZES: [usize; 4] = [5, 4, 6, 3];

fn config(d: usize, layers: usize, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        embed_dim: d,
        layers,
        mlp_hidden: vec![7, 5],
        field_sizes: SIZES.to_vec(),
        ablation,
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, start_id: usize) -> Vec<Row> {
    (0..n)
        .map(|i| Row {
            row_id: start_id + i,
            timestamp: (start_id + i) as i64,
            values: SIZES
                .iter()
                .map(|&s| rng.random_range(0..s as u32))
                .collect(),
            label: rng.random_range(0..2),
        })
        .collect()
}

fn graph(rows: &[Row]) -> PropagationGraph {
    let refs: Vec<&Row> = rows.iter().collect();
    build_from_rows(&refs, SIZES.len()).unwrap()
}

fn random_graphs(seed: u64, count: usize, k: usize) -> Vec<Vec<Row>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|g| random_rows(&mut rng, k + 1, g * 100))
        .collect()
}

fn logits(model: &PetModel, groups: &[Vec<Row>]) -> Vec<f64> {
    let graphs: Vec<_> = groups.iter().map(|g| graph(g)).collect();
    model
        .predict_logits(&batch_graphs(&graphs).unwrap())
        .unwrap()
}

// Straight-loop forward pass used as an oracle for the tape version.
fn reference_logit(model: &PetModel, g: &PropagationGraph) -> f64 {
    let c = model.config();
    let s = model.store();
    let d = c.embed_dim;
    let p = |n: &str| s.by_name(n).unwrap();
    let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..w.rows())
            .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(0.0)).collect() };
    let mut h: Vec<Vec<f64>> = Vec::new();
    for (i, dn) in g.data_nodes.iter().enumerate() {
        if i == 0 || c.ablation == Ablation::NoNodeLabels {
            h.push(vec![0.0; d]);
        } else {
            h.push(p("phi_y").row(dn.tag.index()).to_vec());
        }
    }
    for fnode in &g.feature_nodes {
        let off: usize = c.field_sizes[..fnode.field].iter().sum();
        h.push(p("phi_x").row(off + fnode.code as usize).to_vec());
    }
    let use_edges = c.ablation != Ablation::NoEdgeLabels;
    let mut e: Vec<Vec<f64>> = g
        .edges
        .iter()
        .map(|ed| {
            if !use_edges {
                return vec![];
            }
            let table = match ed.direction {
                EdgeDirection::OutOfData => "phi_in",
                EdgeDirection::IntoData => "phi_out",
            };
            p(table).row(ed.tag.index()).to_vec()
        })
        .collect();
    for l in 0..c.layers {
        let w = |n: &str| p(&format!("layer{l}.{n}"));
        let msgs: Vec<Vec<f64>> = g
            .edges
            .iter()
            .zip(&e)
            .map(|(ed, ev)| {
                let hs = &h[ed.src];
                if use_edges {
                    let mut m: Vec<f64> = ev.iter().zip(hs).map(|(a, b)| a * b).collect();
                    m.extend_from_slice(hs);
                    m
                } else {
                    hs.clone()
                }
            })
            .collect();
        let mut new_h = Vec::with_capacity(h.len());
        for j in 0..h.len() {
            let q = matvec(w("w_q"), &h[j]);
            let inbound: Vec<usize> = (0..g.edges.len())
                .filter(|&k| g.edges[k].dst == j)
                .collect();
            let scores: Vec<f64> = inbound
                .iter()
                .map(|&k| {
                    q.iter()
                        .zip(matvec(w("w_k"), &msgs[k]))
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut agg = vec![0.0; d];
            for (&k, s) in inbound.iter().zip(&scores) {
                let a = (s - mx).exp() / z;
                for (acc, v) in agg.iter_mut().zip(matvec(w("w_v"), &msgs[k])) {
                    *acc += a * v;
                }
            }
            let mut cat = h[j].clone();
            cat.extend(agg);
            new_h.push(relu(matvec(w("w_n"), &cat)));
        }
        h = new_h;
        if use_edges {
            e = g
                .edges
                .iter()
                .zip(&e)
                .map(|(ed, ev)| {
                    let mut cat = h[ed.src].clone();
                    cat.extend_from_slice(&h[ed.dst]);
                    cat.extend_from_slice(ev);
                    relu(matvec(w("w_e"), &cat))
                })
                .collect();
        }
    }
    let mut x = h[0].clone();
    let layers = c.mlp_hidden.len() + 1;
    for i in 0..layers {
        let mut y = matvec(p(&format!("mlp{i}.weight")), &x);
        for (v, b) in y.iter_mut().zip(p(&format!("mlp{i}.bias")).data()) {
            *v += b;
        }
        x = if i + 1 < layers { relu(y) } else { y };
    }
    x[0]
}

#[test]
fn ablation_names_roundtrip() {
    for a in Ablation::ALL {
        assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
    }
    assert!(matches!(
        "edges".parse::<Ablation>(),
        Err(ModelError::UnknownAblation(_))
    ));
}

#[test]
fn init_ranges() {
    let model = PetModel::new(config(16, 2, Ablation::None), 3).unwrap();
    let s = model.store();
    for (_, name, t) in s.iter() {
        let bound = if name.starts_with("phi_") {
            0.25
        } else if name.ends_with(".bias") {
            0.0
        } else {
            (6.0 / (t.rows() + t.cols()) as f64).sqrt()
        };
        assert!(t.max_abs() <= bound, "{name}");
        if bound > 0.0 {
            assert!(t.max_abs() > bound * 0.5, "{name} suspiciously small");
        }
    }
    assert_eq!(s.by_name("phi_x").unwrap().shape(), (18, 16));
    assert_eq!(s.by_name("layer1.w_k").unwrap().shape(), (16, 32));
    assert_eq!(s.by_name("mlp2.weight").unwrap().shape(), (1, 5));
    let no_edge = PetModel::new(config(16, 2, Ablation::NoEdgeLabels), 3).unwrap();
    assert_eq!(
        no_edge.store().by_name("layer0.w_k").unwrap().shape(),
        (16, 16)
    );
    assert!(no_edge.store().by_name("phi_in").is_none());
    assert!(no_edge.store().by_name("layer0.w_e").is_none());
}

#[test]
fn initial_states_follow_node_role() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = random_rows(&mut rng, 3, 0);
    rows[1].label = 1;
    rows[2].label = 0;
    let g = graph(&rows);
    let b = batch_graphs(std::slice::from_ref(&g)).unwrap();
    for ablation in [Ablation::None, Ablation::NoNodeLabels] {
        let model = PetModel::new(config(4, 0, ablation), 1).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward_on_tape(&mut tape, model.store(), &b, &ForwardOptions::default())
            .unwrap();
        let h = tape.value(out.node_states);
        let phi_y = model.store().by_name("phi_y").unwrap();
        assert_eq!(h.row(0), &[0.0; 4]);
        if ablation == Ablation::None {
            assert_eq!(h.row(1), phi_y.row(1));
            assert_eq!(h.row(2), phi_y.row(0));
        } else {
            assert_eq!(h.row(1), &[0.0; 4]);
            assert_eq!(h.row(2), &[0.0; 4]);
        }
        for (j, f) in g.feature_nodes.iter().enumerate() {
            let off: usize = SIZES[..f.field].iter().sum();
            assert_eq!(
                h.row(3 + j),
                model
                    .store()
                    .by_name("phi_x")
                    .unwrap()
                    .row(off + f.code as usize)
            );
        }
    }
}

#[test]
fn message_concatenates_gated_and_raw_source() {
    // target [0,0,0,0], neighbor [1,1,1,1] with label 1: the neighbor's
    // feature nodes each have one inbound edge, from the neighbor.
    let rows = vec![
        Row {
            row_id: 0,
            timestamp: 0,
            values: vec![0, 0, 0, 0],
            label: 0,
        },
        Row {
            row_id: 1,
            timestamp: 1,
            values: vec![1, 1, 1, 1],
            label: 1,
        },
    ];
    let g = graph(&rows);
    let b = batch_graphs(std::slice::from_ref(&g)).unwrap();
    let feature_of_neighbor = 2 + g
        .feature_nodes
        .iter()
        .position(|f| f.field == 0 && f.code == 1)
        .unwrap();

    let mut cfg = config(2, 1, Ablation::None);
    cfg.mlp_hidden = vec![];
    let base = PetModel::new(cfg, 0).unwrap();
    // m = ([1,2] ⊙ [3,4]) ∥ [3,4] = [3,8,3,4]; W_V picks half of it
    for (w_v, expect) in [
        (vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], [3.0, 8.0]),
        (vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], [3.0, 4.0]),
    ] {
        let mut model = base.clone();
        let s = model.store_mut();
        let set = |s: &mut ParamStore, name: &str, t: Tensor| {
            let id = s.id(name).unwrap();
            *s.get_mut(id) = t;
        };
        let y = s.by_name("phi_y").unwrap().clone();
        let mut y2 = y.clone();
        y2.row_mut(1).copy_from_slice(&[3.0, 4.0]);
        set(s, "phi_y", y2);
        let mut pin = s.by_name("phi_in").unwrap().clone();
        pin.row_mut(1).copy_from_slice(&[1.0, 2.0]);
        set(s, "phi_in", pin);
        set(s, "layer0.w_v", Tensor::from_vec(2, 4, w_v));
        // h' = ReLU(n)
        set(
            s,
            "layer0.w_n",
            Tensor::from_vec(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        );
        let mut tape = Tape::new();
        let out = model
            .forward_on_tape(&mut tape, model.store(), &b, &ForwardOptions::default())
            .unwrap();
        assert_eq!(
            tape.value(out.node_states).row(feature_of_neighbor),
            &expect
        );
    }
}

#[test]
fn forward_matches_loop_reference() {
    let groups = random_graphs(11, 6, 5);
    for ablation in Ablation::ALL {
        for layers in [0, 1, 3] {
            let model = PetModel::new(config(6, layers, ablation), 17).unwrap();
            let got = logits(&model, &groups);
            for (g, &z) in groups.iter().zip(&got) {
                let want = reference_logit(&model, &graph(g));
                assert!(
                    (z - want).abs() < 1e-9,
                    "{ablation} L={layers}: {z} vs {want}"
                );
            }
        }
    }
}

#[test]
fn attention_normalizes_per_destination() {
    let groups = random_graphs(2, 4, 8);
    let graphs: Vec<_> = groups.iter().map(|g| graph(g)).collect();
    let b = batch_graphs(&graphs).unwrap();
    let model = PetModel::new(config(8, 3, Ablation::None), 9).unwrap();
    let mut tape = Tape::new();
    let out = model
        .forward_on_tape(&mut tape, model.store(), &b, &ForwardOptions::default())
        .unwrap();
    assert_eq!(out.attention.len(), 3);
    for a in &out.attention {
        let mut sums = vec![0.0; b.num_nodes()];
        for (&w, &dst) in tape.value(*a).data().iter().zip(&b.edge_dst) {
            assert!((0.0..=1.0).contains(&w));
            sums[dst] += w;
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn logits_independent_of_batch_composition() {
    let groups = random_graphs(4, 7, 6);
    let model = PetModel::new(config(8, 2, Ablation::None), 2).unwrap();
    let together = logits(&model, &groups);
    for (g, &z) in groups.iter().zip(&together) {
        let alone = logits(&model, std::slice::from_ref(g))[0];
        assert!((z - alone).abs() < 1e-9);
    }
    let reversed: Vec<_> = groups.iter().rev().cloned().collect();
    let back = logits(&model, &reversed);
    for (a, b) in together.iter().zip(back.iter().rev()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn logits_invariant_to_neighbor_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = PetModel::new(config(8, 3, Ablation::None), 4).unwrap();
    for trial in 0..20 {
        let rows = random_rows(&mut rng, 7, trial * 10);
        let base = logits(&model, std::slice::from_ref(&rows))[0];
        let mut perm = rows.clone();
        let tail = &mut perm[1..];
        for i in (1..tail.len()).rev() {
            tail.swap(i, rng.random_range(0..=i));
        }
        let z = logits(&model, &[perm])[0];
        assert!((z - base).abs() < 1e-9, "{z} vs {base}");
    }
}

#[test]
fn neighbor_labels_move_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut changed = 0;
    for trial in 0..100 {
        let model = PetModel::new(config(16, 3, Ablation::None), trial).unwrap();
        let rows = random_rows(&mut rng, 6, 0);
        let mut flipped = rows.clone();
        for r in &mut flipped[1..] {
            r.label ^= 1;
        }
        let z = logits(&model, &[rows, flipped]);
        if (z[0] - z[1]).abs() > 1e-12 {
            changed += 1;
        }
    }
    assert!(changed >= 95, "{changed}/100");
}

#[test]
fn labels_need_two_layers_to_reach_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for ablation in [Ablation::None, Ablation::NoEdgeLabels] {
        let one = PetModel::new(config(8, 1, ablation), 5).unwrap();
        let two = PetModel::new(config(8, 2, ablation), 5).unwrap();
        let rows = random_rows(&mut rng, 5, 0);
        let mut flipped = rows.clone();
        for r in &mut flipped[1..] {
            r.label ^= 1;
        }
        let z1 = logits(&one, &[rows.clone(), flipped.clone()]);
        assert_eq!(z1[0], z1[1]);
        let z2 = logits(&two, &[rows, flipped]);
        assert_ne!(z2[0], z2[1]);
    }
}

#[test]
fn one_layer_sees_only_target_neighborhood() {
    let rows = random_graphs(30, 1, 6).remove(0);
    let g = graph(&rows);
    let b = batch_graphs(std::slice::from_ref(&g)).unwrap();
    let near: Vec<bool> = {
        let dist = g.distances_from_target();
        dist.iter().map(|&d| d <= 1).collect()
    };
    let touches_target: Vec<bool> = b
        .edge_src
        .iter()
        .zip(&b.edge_dst)
        .map(|(&s, &d)| s == 0 || d == 0)
        .collect();
    let opts = ForwardOptions {
        zero_nodes: Some(near.iter().map(|n| !n).collect()),
        zero_edges: Some(touches_target.iter().map(|t| !t).collect()),
    };
    for layers in [1, 2] {
        let model = PetModel::new(config(8, layers, Ablation::None), 6).unwrap();
        let mut tape = Tape::new();
        let full = model
            .forward_on_tape(&mut tape, model.store(), &b, &ForwardOptions::default())
            .unwrap();
        let masked = model
            .forward_on_tape(&mut tape, model.store(), &b, &opts)
            .unwrap();
        let (a, m) = (
            tape.value(full.logits).item(),
            tape.value(masked.logits).item(),
        );
        if layers == 1 {
            assert_eq!(a, m);
        } else {
            assert_ne!(a, m);
        }
    }
}

#[test]
fn zero_layers_is_mlp_of_zero() {
    let model = PetModel::new(config(8, 0, Ablation::None), 1).unwrap();
    let z = logits(&model, &random_graphs(3, 5, 4));
    let s = model.store();
    let mut x = vec![0.0; 8];
    for i in 0..3 {
        let w = s.by_name(&format!("mlp{i}.weight")).unwrap();
        let b = s.by_name(&format!("mlp{i}.bias")).unwrap();
        x = (0..w.rows())
            .map(|r| {
                let v: f64 = w.row(r).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b.data()[r];
                if i < 2 {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect();
    }
    for v in z {
        assert_eq!(v, x[0]);
    }
}

#[test]
fn loss_examples() {
    assert!((summed_loss(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((summed_loss(&[0.0, 0.0], &[1.0, 0.0]) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    let model = PetModel::new(config(4, 1, Ablation::None), 1).unwrap();
    let groups = random_graphs(1, 3, 2);
    let graphs: Vec<_> = groups.iter().map(|g| graph(g)).collect();
    let b = batch_graphs(&graphs).unwrap();
    let labels = [1.0, 0.0, 1.0];
    let (loss, grads) = model.loss_and_grads(&b, &labels).unwrap();
    let z = model.predict_logits(&b).unwrap();
    assert!((loss - summed_loss(&z, &labels)).abs() < 1e-12);
    assert_eq!(grads.len(), model.store().len());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let groups = random_graphs(40, 4, 5);
    let graphs: Vec<_> = groups.iter().map(|g| graph(g)).collect();
    let b = batch_graphs(&graphs).unwrap();
    let labels: Vec<f64> = groups.iter().map(|g| g[0].label as f64).collect();
    for ablation in Ablation::ALL {
        let model = PetModel::new(config(8, 2, ablation), 77).unwrap();
        let report = grad_check(
            model.store(),
            |s, tape| -> Result<Var, ModelError> {
                let out = model.forward_on_tape(tape, s, &b, &ForwardOptions::default())?;
                Ok(tape.bce_with_logits(out.logits, labels.clone()))
            },
            &GradCheckOptions {
                eps: 1e-4,
                tol: 1e-4,
                max_coords_per_param: None,
                seed: 1,
            },
        )
        .unwrap();
        assert!(report.passed(), "{ablation}: {report:?}");
    }
}

#[test]
fn bad_nodes_are_rejected() {
    let model = PetModel::new(config(4, 1, Ablation::None), 1).unwrap();
    let rows = random_graphs(1, 1, 2).remove(0);
    let mut b = batch_graphs(&[graph(&rows)]).unwrap();
    b.nodes[1] = NodeKind::Data {
        row_id: 1,
        tag: LabelTag::Unknown,
    };
    assert!(matches!(
        model.predict_logits(&b),
        Err(ModelError::BadNode { node: 1, .. })
    ));
    let mut b = batch_graphs(&[graph(&rows)]).unwrap();
    b.nodes[3] = NodeKind::Feature { field: 0, code: 99 };
    assert!(matches!(
        model.predict_logits(&b),
        Err(ModelError::BadNode { node: 3, .. })
    ));
}

#[test]
fn checkpoint_roundtrip_and_refusals() {
    for ablation in Ablation::ALL {
        let model = PetModel::new(config(4, 2, ablation), 8).unwrap();
        let bytes = encode_checkpoint(&model, "k = 10\n");
        let ck = decode_checkpoint(&bytes, Some(model.config())).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.metadata, "k = 10\n");
        assert_eq!(encode_checkpoint(&ck.model, &ck.metadata), bytes);

        let other = config(8, 2, ablation);
        assert!(matches!(
            decode_checkpoint(&bytes, Some(&other)),
            Err(ModelError::ShapeMismatch(_))
        ));
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], None).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, None).is_err());
    }
}

#[test]
fn export_shapes_and_labels() {
    let groups = random_graphs(9, 5, 3);
    let graphs: Vec<_> = groups.iter().map(|g| graph(g)).collect();
    let b = batch_graphs(&graphs).unwrap();
    let labels: Vec<u8> = groups.iter().map(|g| g[0].label).collect();
    let model = PetModel::new(config(4, 2, Ablation::None), 3).unwrap();
    let rows = export_embeddings(&model, &b, &labels).unwrap();
    assert_eq!(rows.len(), 5);
    let data = rows.data_tsv();
    let feat = rows.feature_tsv();
    for (line, &y) in data.lines().zip(&labels) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[4], y.to_string());
    }
    for line in feat.lines() {
        assert_eq!(line.split('\t').count(), 4 * 4 + 1);
    }
}
