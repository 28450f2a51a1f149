use ognet::geometry::{knn_graph, nearest_groups, position_keys};
use ognet::layers::{
    dynamic_graph_conv, Aggregation, GraphKeys, GroupingBranch, ModuleConfig, OmniScaleModule,
    Positions, SeBlock,
};
use ognet::params::{Forward, ParamStore};
use ognet::tensor::{gradient_check, GradCheckOptions, BN_EPS};
use ognet::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn points(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 3]> {
    (0..m)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// `x [rows, a] @ w [a, b]` with plain loops.
fn matmul(x: &[f64], w: &[f64], a: usize, b: usize) -> Vec<f64> {
    let rows = x.len() / a;
    let mut out = vec![0.0; rows * b];
    for r in 0..rows {
        for j in 0..b {
            out[r * b + j] = (0..a).map(|t| x[r * a + t] * w[t * b + j]).sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
}

fn batch_norm_train(x: &[f64], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for j in 0..c {
        let mean: f64 = (0..rows).map(|r| x[r * c + j]).sum::<f64>() / rows as f64;
        let var: f64 = (0..rows).map(|r| (x[r * c + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * c + j] = gamma[j] * (x[r * c + j] - mean) / (var + BN_EPS).sqrt() + beta[j];
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

#[test]
fn graph_conv_matches_per_edge_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, c, c2, k) = (8, 3, 4, 3);
    let x = uniform(&mut rng, &[m, c]);
    let ts = uniform(&mut rng, &[c, c2]);
    let tn = uniform(&mut rng, &[c, c2]);
    let pts = points(&mut rng, m);
    let g = knn_graph(&position_keys(&pts), 3, k).unwrap();

    for aggregation in [Aggregation::Sum, Aggregation::Max] {
        let mut tape = Tape::new();
        let (xv, sv, nv) = (tape.leaf(x.clone()), tape.leaf(ts.clone()), tape.leaf(tn.clone()));
        let out = dynamic_graph_conv(&mut tape, xv, g.neighbors(), k, sv, nv, aggregation).unwrap();
        let got = tape.data(out);
        for i in 0..m {
            for o in 0..c2 {
                let edge = |j: usize| -> f64 {
                    (0..c)
                        .map(|a| x.data()[i * c + a] * ts.data()[a * c2 + o] + x.data()[j * c + a] * tn.data()[a * c2 + o])
                        .sum()
                };
                let expect = match aggregation {
                    Aggregation::Sum => g.row(i).iter().map(|&j| edge(j)).sum::<f64>(),
                    Aggregation::Max => g.row(i).iter().map(|&j| edge(j)).fold(f64::NEG_INFINITY, f64::max),
                };
                assert!((got[i * c2 + o] - expect).abs() < 1e-10, "{aggregation:?} {i} {o}");
            }
        }
    }
}

#[test]
fn graph_conv_rejects_wrong_table() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4, 2]));
    let w = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(dynamic_graph_conv(&mut tape, x, &[0, 1, 2], 1, w, w, Aggregation::Sum).is_err());
}

#[test]
fn se_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let (groups, l, c) = (3, 5, 8);
    let se = SeBlock::new(&mut store, "se", c, 4, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = uniform(&mut rng, &[groups * l, c]);
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, &store, Mode::Train);
    let xv = fx.tape.leaf(x.clone());
    let (out, _) = se.forward(&mut fx, xv, groups).unwrap();
    let got = tape.data(out).to_vec();

    let h = c / 4;
    let w1 = store.get(se.fc1().weight()).data();
    let b1 = store.get(se.fc1().bias().unwrap()).data();
    let w2 = store.get(se.fc2().weight()).data();
    let b2 = store.get(se.fc2().bias().unwrap()).data();
    for g in 0..groups {
        let rows = &x.data()[g * l * c..(g + 1) * l * c];
        let z: Vec<f64> = (0..c).map(|j| (0..l).map(|r| rows[r * c + j]).sum::<f64>() / l as f64).collect();
        let mut a = matmul(&z, w1, c, h);
        add_bias(&mut a, b1);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut s = matmul(&a, w2, h, c);
        add_bias(&mut s, b2);
        for r in 0..l {
            for j in 0..c {
                let expect = rows[r * c + j] * sigmoid(s[j]);
                assert!((got[g * l * c + r * c + j] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn se_with_zero_weights_halves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 4, 4, &mut rng).unwrap();
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = uniform(&mut rng, &[6, 4]);
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, &store, Mode::Train);
    let xv = fx.tape.leaf(x.clone());
    let (out, _) = se.forward(&mut fx, xv, 2).unwrap();
    for (o, v) in tape.data(out).iter().zip(x.data()) {
        assert!((o - 0.5 * v).abs() < 1e-15);
    }
}

/// Loop oracle for one grouping branch in train mode.
fn branch_oracle(store: &ParamStore, b: &GroupingBranch, x: &[f64], groups: &[usize], n: usize, c: usize) -> Vec<f64> {
    let r = b.rate;
    let points = x.len() / c;
    let h = store.get(b.lin1().weight()).shape()[1];
    let mut gathered = Vec::with_capacity(groups.len() * c);
    for &j in groups {
        gathered.extend_from_slice(&x[j * c..(j + 1) * c]);
    }
    let mut a = matmul(&gathered, store.get(b.lin1().weight()).data(), c, h);
    add_bias(&mut a, store.get(b.lin1().bias().unwrap()).data());
    let names = |suffix: &str| -> Vec<f64> {
        let id = store.ids().find(|&id| store.name(id).ends_with(suffix)).unwrap();
        store.get(id).data().to_vec()
    };
    let mut a = batch_norm_train(&a, h, &names("bn1.gamma"), &names("bn1.beta"));
    a.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut z = matmul(&a, store.get(b.lin2().weight()).data(), h, c);
    add_bias(&mut z, store.get(b.lin2().bias().unwrap()).data());
    let mut z = batch_norm_train(&z, c, &names("bn2.gamma"), &names("bn2.beta"));
    if let Some(se) = b.se() {
        let per = z.len() / n;
        let hs = c / 4;
        for s in 0..n {
            let block = &mut z[s * per..(s + 1) * per];
            let l = per / c;
            let mean: Vec<f64> = (0..c).map(|j| (0..l).map(|t| block[t * c + j]).sum::<f64>() / l as f64).collect();
            let mut q = matmul(&mean, store.get(se.fc1().weight()).data(), c, hs);
            add_bias(&mut q, store.get(se.fc1().bias().unwrap()).data());
            q.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut g = matmul(&q, store.get(se.fc2().weight()).data(), hs, c);
            add_bias(&mut g, store.get(se.fc2().bias().unwrap()).data());
            for t in 0..l {
                for j in 0..c {
                    block[t * c + j] *= sigmoid(g[j]);
                }
            }
        }
    }
    let mut out = vec![f64::NEG_INFINITY; points * c];
    for p in 0..points {
        for t in 0..r {
            for j in 0..c {
                let v = z[(p * r + t) * c + j];
                out[p * c + j] = out[p * c + j].max(v);
            }
        }
    }
    out
}

fn run_branch(rate: usize, use_se: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, c) = (2, 10, 8);
    let mut store = ParamStore::new();
    let branch = GroupingBranch::new(&mut store, "b", c, 2, rate, use_se, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = uniform(&mut rng, &[n * m, c]);
    let mut groups = Vec::new();
    for s in 0..n {
        let pts = points(&mut rng, m);
        let local = nearest_groups(&position_keys(&pts), 3, rate).unwrap();
        groups.extend(local.iter().map(|&j| s * m + j));
    }
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, &store, Mode::Train);
    let xv = fx.tape.leaf(x.clone());
    let out = branch.forward(&mut fx, &store, xv, &groups, n).unwrap();
    let got = tape.data(out).to_vec();
    let expect = branch_oracle(&store, &branch, x.data(), &groups, n, c);
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }
}

#[test]
fn branch_matches_loop_oracle() {
    run_branch(4, true, 4);
    run_branch(3, false, 5);
}

#[test]
fn branch_with_rate_one_is_pointwise() {
    run_branch(1, true, 6);
}

fn module_config(c_in: usize, c_out: usize, target: Option<usize>, shortcut: bool) -> ModuleConfig {
    ModuleConfig {
        c_in,
        c_out,
        target,
        k: 4,
        rates: vec![2, 3, 5],
        shortcut,
        keys: GraphKeys::Position,
        aggregation: Aggregation::Sum,
        use_graph: true,
        use_se: true,
    }
}

#[test]
fn module_output_is_branch_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, m, c) = (2, 12, 4);
    let mut store = ParamStore::new();
    let module = OmniScaleModule::new(&mut store, "m", module_config(c, c, None, false), &mut rng).unwrap();
    let x = uniform(&mut rng, &[n * m, c]);
    let xyz: Vec<[f64; 3]> = (0..n).flat_map(|_| points(&mut rng, m)).collect();
    let pos = Positions::new(n, m, xyz).unwrap();

    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, &store, Mode::Train);
    let xv = fx.tape.leaf(x.clone());
    let (out, out_pos, trace) = module.forward(&mut fx, &store, xv, &pos).unwrap();
    assert_eq!(out_pos, pos);
    assert_eq!(trace.points_out, m);
    let total = tape.data(out).to_vec();

    // Recompute: branch outputs on the conv features, summed in reverse order.
    let conv_out = {
        let mut t2 = Tape::new();
        let mut fx2 = Forward::new(&mut t2, &store, Mode::Train);
        let xv = fx2.tape.leaf(x.clone());
        let (ts, tn) = module.graph_weights().unwrap();
        let (ts, tn) = (fx2.var(ts), fx2.var(tn));
        let mut global = Vec::new();
        for s in 0..n {
            let g = knn_graph(&position_keys(pos.cloud(s)), 3, 4).unwrap();
            global.extend(g.neighbors().iter().map(|&j| s * m + j));
        }
        let h = dynamic_graph_conv(fx2.tape, xv, &global, 4, ts, tn, Aggregation::Sum).unwrap();
        let h = module.conv_bn().forward(&mut fx2, &store, h).unwrap();
        let h = fx2.tape.relu(h);
        t2.data(h).to_vec()
    };
    let mut sum = vec![0.0; total.len()];
    for branch in module.branches().iter().rev() {
        let mut groups = Vec::new();
        for s in 0..n {
            let local = nearest_groups(&position_keys(pos.cloud(s)), 3, branch.rate).unwrap();
            groups.extend(local.iter().map(|&j| s * m + j));
        }
        let y = branch_oracle(&store, branch, &conv_out, &groups, n, c);
        sum.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    }
    for (a, b) in total.iter().zip(&sum) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn module_downsamples_and_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, m) = (2, 20);
    let mut store = ParamStore::new();
    let module = OmniScaleModule::new(&mut store, "m", module_config(3, 8, Some(7), false), &mut rng).unwrap();
    let x = uniform(&mut rng, &[n * m, 3]);
    let xyz: Vec<[f64; 3]> = (0..n).flat_map(|_| points(&mut rng, m)).collect();
    let pos = Positions::new(n, m, xyz).unwrap();
    let mut tape = Tape::new();
    let mut fx = Forward::new(&mut tape, &store, Mode::Train);
    let xv = fx.tape.leaf(x);
    let (out, out_pos, trace) = module.forward(&mut fx, &store, xv, &pos).unwrap();
    assert_eq!(tape.shape(out), &[n * 7, 8]);
    assert_eq!(out_pos.m, 7);
    let sel = trace.selected.unwrap();
    for s in 0..n {
        for (t, &j) in sel[s].iter().enumerate() {
            assert_eq!(out_pos.xyz[s * 7 + t], pos.xyz[s * m + j]);
        }
    }
}

#[test]
fn shortcut_requires_equal_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    assert!(OmniScaleModule::new(&mut store, "m", module_config(4, 8, None, true), &mut rng).is_err());
}

#[test]
fn module_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, m, c) = (2, 16, 4);
    for (target, shortcut) in [(None, true), (Some(9), true), (Some(9), false)] {
        let mut store = ParamStore::new();
        let module =
            OmniScaleModule::new(&mut store, "m", module_config(c, c, target, shortcut), &mut rng).unwrap();
        let x = uniform(&mut rng, &[n * m, c]);
        let xyz: Vec<[f64; 3]> = (0..n).flat_map(|_| points(&mut rng, m)).collect();
        let pos = Positions::new(n, m, xyz).unwrap();
        let out_rows = n * target.unwrap_or(m);
        let weights: Vec<f64> = (0..out_rows * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut inputs = store.tensors().to_vec();
        inputs.push(x);
        let p = store.len();
        let err = gradient_check(
            |tape, vars| {
                let mut fx = Forward::with_vars(tape, vars[..p].to_vec(), Mode::Train);
                let (out, _, _) = module.forward(&mut fx, &store, vars[p], &pos)?;
                tape.dot(out, &weights)
            },
            &inputs,
            &GradCheckOptions {
                max_entries: Some(200),
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "target {target:?}: {err}");
    }
}
