//! Named finite-difference checks over every differentiable operation, the
//! layers built from them and a small end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{knn_graph, nearest_groups, position_keys};
use crate::layers::{
    dynamic_graph_conv, Aggregation, GraphKeys, GroupingBranch, ModuleConfig, OmniScaleModule, Positions, SeBlock,
};
use crate::model::{OgNet, OgNetConfig, Variant};
use crate::params::{Forward, ParamStore};
use crate::tensor::{gradient_check, GradCheckOptions, Mode, Reduce, Tape, Tensor, Var};
use crate::training::{circle_loss, CircleParams};

/// Relative-error bound for single operations and layers.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

pub const OP_CASES: [&str; 27] = [
    "linear",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "dropout",
    "add",
    "mul",
    "scale",
    "reshape",
    "concat",
    "split",
    "mean_axis",
    "max_axis",
    "gather_rows",
    "neighbor_sum",
    "neighbor_max",
    "channel_scale",
    "dot",
    "sum",
    "l2_normalize",
    "softmax_cross_entropy",
    "bn_group_pool",
    "circle_loss",
    "graph_conv",
    "se_block",
    "grouping_branch",
];
pub const LAYER_CASES: [&str; 1] = ["omni_module"];
pub const MODEL_CASES: [&str; 1] = ["ogn_small"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero, so kinks stay out of reach of the
/// difference step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Checks `f` composed with a fixed random projection to a scalar.
fn projected<F>(inputs: &[Tensor], seed: u64, mut f: F, opts: &GradCheckOptions) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Vec<f64>> = None;
    gradient_check(
        |tape, v| {
            let y = f(tape, v)?;
            let n = tape.value(y).numel();
            let w = weights.get_or_insert_with(|| projection(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed), n));
            tape.dot(y, w)
        },
        inputs,
        opts,
    )
}

fn points(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 3]> {
    (0..m)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

/// Moves every parameter off its initial value so BN scales, biases and
/// gates are all exercised.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn layer_check<F>(store: &ParamStore, x: Tensor, seed: u64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Forward<'_>, Var) -> Result<Var>,
{
    let p = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(x);
    let opts = GradCheckOptions {
        max_entries: Some(300),
        seed,
        ..Default::default()
    };
    projected(
        &inputs,
        seed,
        |tape, v| {
            let mut fx = Forward::with_vars(tape, v[..p].to_vec(), Mode::Train);
            f(&mut fx, v[p])
        },
        &opts,
    )
}

fn op_case(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let (n, c) = (6, 5);
    let running = (projection(&mut rng, c), vec![0.5, 0.8, 1.0, 1.5, 2.0]);
    match name {
        "linear" => {
            let inputs = [uniform(&mut rng, &[n, c]), uniform(&mut rng, &[c, 3]), uniform(&mut rng, &[3])];
            projected(&inputs, seed, |t, v| t.linear(v[0], v[1], Some(v[2])), &opts)
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if name.ends_with("train") { Mode::Train } else { Mode::Eval };
            let inputs = [uniform(&mut rng, &[n, c]), uniform(&mut rng, &[c]), uniform(&mut rng, &[c])];
            projected(
                &inputs,
                seed,
                |t, v| Ok(t.batch_norm(v[0], v[1], v[2], (&running.0, &running.1), mode)?.0),
                &opts,
            )
        }
        "relu" => projected(&[off_kink(&mut rng, &[n, c])], seed, |t, v| Ok(t.relu(v[0])), &opts),
        "sigmoid" => projected(&[uniform(&mut rng, &[n, c])], seed, |t, v| Ok(t.sigmoid(v[0])), &opts),
        "dropout" => projected(
            &[uniform(&mut rng, &[n, c])],
            seed,
            |t, v| t.dropout(v[0], 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)),
            &opts,
        ),
        "add" | "mul" => {
            let inputs = [uniform(&mut rng, &[n, c]), uniform(&mut rng, &[n, c])];
            let mul = name == "mul";
            projected(&inputs, seed, |t, v| if mul { t.mul(v[0], v[1]) } else { t.add(v[0], v[1]) }, &opts)
        }
        "scale" => projected(&[uniform(&mut rng, &[n, c])], seed, |t, v| Ok(t.scale(v[0], -2.5)), &opts),
        "reshape" => projected(&[uniform(&mut rng, &[n, c])], seed, |t, v| t.reshape(v[0], &[2, 3, c]), &opts),
        "concat" => {
            let inputs = [uniform(&mut rng, &[2, 3, c]), uniform(&mut rng, &[2, 4, c])];
            projected(&inputs, seed, |t, v| t.concat(&[v[0], v[1]], 1), &opts)
        }
        "split" => projected(
            &[uniform(&mut rng, &[n, c])],
            seed,
            |t, v| {
                let parts = t.split(v[0], 1, &[2, 3])?;
                let a = t.sum(parts[0]);
                let sq = t.mul(parts[1], parts[1])?;
                let b = t.sum(sq);
                t.concat(&[a, b], 0)
            },
            &opts,
        ),
        "mean_axis" => projected(&[uniform(&mut rng, &[2, 3, c])], seed, |t, v| t.mean_axis(v[0], 1), &opts),
        "max_axis" => projected(&[uniform(&mut rng, &[2, 3, c])], seed, |t, v| t.max_axis(v[0], 1), &opts),
        "gather_rows" => {
            let index: Vec<usize> = (0..2 * n).map(|_| rng.random_range(0..n)).collect();
            projected(&[uniform(&mut rng, &[n, c])], seed, |t, v| t.gather_rows(v[0], &index), &opts)
        }
        "neighbor_sum" | "neighbor_max" => {
            let reduce = if name.ends_with("sum") { Reduce::Sum } else { Reduce::Max };
            let k = 3;
            let index: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..n)).collect();
            projected(&[uniform(&mut rng, &[n, c])], seed, |t, v| t.neighbor_reduce(v[0], &index, k, reduce), &opts)
        }
        "channel_scale" => {
            let inputs = [uniform(&mut rng, &[2, 3, c]), uniform(&mut rng, &[2, c])];
            projected(&inputs, seed, |t, v| t.channel_scale(v[0], v[1]), &opts)
        }
        "dot" => {
            let w = projection(&mut rng, n * c);
            gradient_check(|t, v| t.dot(v[0], &w), &[uniform(&mut rng, &[n, c])], &opts)
        }
        "sum" => projected(
            &[uniform(&mut rng, &[n, c])],
            seed,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &opts,
        ),
        "l2_normalize" => projected(&[off_kink(&mut rng, &[n, c])], seed, |t, v| t.l2_normalize(v[0]), &opts),
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let x = Tensor::from_fn(&[n, c], |_| rng.random_range(-3.0..3.0));
            gradient_check(|t, v| t.softmax_cross_entropy(v[0], &labels), &[x], &opts)
        }
        "bn_group_pool" => {
            let (r, segs) = (3, 2);
            let inputs = [uniform(&mut rng, &[r * segs * 2, c]), uniform(&mut rng, &[c]), uniform(&mut rng, &[c])];
            let mut worst = 0.0f64;
            for mode in [Mode::Train, Mode::Eval] {
                let err = projected(
                    &inputs,
                    seed,
                    |t, v| Ok(t.bn_group_pool(v[0], v[1], v[2], (&running.0, &running.1), mode, r, segs)?.0),
                    &opts,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }
        "circle_loss" => {
            let labels = [0, 0, 1, 1, 2, 0];
            let params = CircleParams {
                gamma: 4.0,
                ..CircleParams::default()
            };
            let x = uniform(&mut rng, &[labels.len(), 8]);
            gradient_check(|t, v| Ok(circle_loss(t, v[0], &labels, params)?.loss), &[x], &opts)
        }
        "graph_conv" => {
            let (m, k) = (8, 3);
            let g = knn_graph(&position_keys(&points(&mut rng, m)), 3, k)?;
            let inputs = [uniform(&mut rng, &[m, c]), uniform(&mut rng, &[c, 4]), uniform(&mut rng, &[c, 4])];
            let mut worst = 0.0f64;
            for agg in [Aggregation::Sum, Aggregation::Max] {
                let err = projected(
                    &inputs,
                    seed,
                    |t, v| dynamic_graph_conv(t, v[0], g.neighbors(), k, v[1], v[2], agg),
                    &opts,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }
        "se_block" => {
            let mut store = ParamStore::new();
            let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng)?;
            perturb(&mut store, &mut rng);
            let x = uniform(&mut rng, &[2 * 5, 8]);
            layer_check(&store, x, seed, |fx, x| Ok(se.forward(fx, x, 2)?.0))
        }
        "grouping_branch" => {
            let (groups_n, m, width, rate) = (2, 10, 8, 4);
            let mut store = ParamStore::new();
            let branch = GroupingBranch::new(&mut store, "b", width, 4, rate, true, &mut rng)?;
            perturb(&mut store, &mut rng);
            let mut groups = Vec::new();
            for s in 0..groups_n {
                let local = nearest_groups(&position_keys(&points(&mut rng, m)), 3, rate)?;
                groups.extend(local.iter().map(|&j| s * m + j));
            }
            let x = uniform(&mut rng, &[groups_n * m, width]);
            let frozen = store.clone();
            layer_check(&store, x, seed, |fx, x| branch.forward(fx, &frozen, x, &groups, groups_n))
        }
        other => Err(Error::Config(format!("unknown gradient check {other:?}"))),
    }
}

fn module_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, c) = (2, 16, 4);
    let mut worst = 0.0f64;
    for (target, keys) in [(Some(9), GraphKeys::Position), (None, GraphKeys::AppearancePosition)] {
        let cfg = ModuleConfig {
            c_in: c,
            c_out: c,
            target,
            k: 4,
            rates: vec![2, 3, 5],
            shortcut: true,
            keys,
            aggregation: Aggregation::Sum,
            use_graph: true,
            use_se: true,
        };
        let mut store = ParamStore::new();
        let module = OmniScaleModule::new(&mut store, "m", cfg, &mut rng)?;
        perturb(&mut store, &mut rng);
        let xyz: Vec<[f64; 3]> = (0..n).flat_map(|_| points(&mut rng, m)).collect();
        let pos = Positions::new(n, m, xyz)?;
        let x = uniform(&mut rng, &[n * m, c]);
        let frozen = store.clone();
        let err = layer_check(&store, x, seed, |fx, x| Ok(module.forward(fx, &frozen, x, &pos)?.0))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// OG-Net-Small on 64-point clouds with a 4-way cross-entropy loss; checks a
/// random subset of the parameters.
fn model_case(seed: u64, entries: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 64;
    let mut cfg = OgNetConfig::new(Variant::OgnSmall, 4).scaled_points(m);
    cfg.k = 8;
    let mut net = OgNet::from_config(cfg, seed)?;
    perturb_model(&mut net, &mut rng);
    let n = 4;
    let input = Tensor::from_fn(&[n, m, 6], |i| {
        if i % 6 < 3 {
            rng.random_range(-1.0..1.0)
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let labels = [0, 1, 2, 3];
    let opts = GradCheckOptions {
        max_entries: Some(entries),
        seed,
        ..Default::default()
    };
    gradient_check(
        |tape, v| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
            let out = net.forward_with(tape, v.to_vec(), &input, Mode::Train, &mut drop_rng)?;
            tape.softmax_cross_entropy(out.logits, &labels)
        },
        net.params().tensors(),
        &opts,
    )
}

fn perturb_model(net: &mut OgNet, rng: &mut ChaCha8Rng) {
    // The classifier starts near zero; widen it so the loss gradient is not
    // dominated by rounding.
    for id in net.params().ids().collect::<Vec<_>>() {
        if net.params().name(id).starts_with("classifier") {
            for v in net.params_mut().get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

/// Runs the checks selected by `scope`: `all`, `ops`, `layers`, `model` or
/// one case name.
pub fn run(scope: &str, seed: u64) -> Result<Vec<GradCase>> {
    let names: Vec<&str> = match scope {
        "all" => OP_CASES.iter().chain(&LAYER_CASES).chain(&MODEL_CASES).copied().collect(),
        "ops" => OP_CASES.to_vec(),
        "layers" => LAYER_CASES.to_vec(),
        "model" => MODEL_CASES.to_vec(),
        one if OP_CASES.contains(&one) || LAYER_CASES.contains(&one) || MODEL_CASES.contains(&one) => vec![one],
        other => return Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
    };
    names
        .into_iter()
        .map(|name| {
            let (max_error, tolerance) = match name {
                "omni_module" => (module_case(seed)?, OP_TOLERANCE),
                "ogn_small" => (model_case(seed, 150)?, MODEL_TOLERANCE),
                op => (op_case(op, seed)?, OP_TOLERANCE),
            };
            Ok(GradCase {
                name: name.to_string(),
                max_error,
                tolerance,
            })
        })
        .collect()
}
