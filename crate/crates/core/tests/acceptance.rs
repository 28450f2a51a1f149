//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! with the measured values, then asserts.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ognet::data::{synthesize, Split, SyntheticSpec};
use ognet::eval::{density_sweep, evaluate, EmbeddingSet, LabeledClouds};
use ognet::geometry::{farthest_point_sample, knn_graph, nearest_groups, position_keys, PointCloud};
use ognet::gradsuite;
use ognet::layers::{dynamic_graph_conv, Aggregation, GraphKeys};
use ognet::model::{OgNet, OgNetConfig, Variant};
use ognet::training::{accuracy, circle_loss, train, CircleParams, LossKind, TrainConfig};
use ognet::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epoch budget for the desk-scale runs; the criterion allows up to 300.
const EPOCHS: usize = 25;
const CIRCLE_EPOCHS: usize = 8;
const EVAL_FRACTION: f64 = 0.5;
const SEED: u64 = 0;

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_points(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 3]> {
    (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, m: usize) -> PointCloud {
    let pos = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0f32..1.0))).collect();
    let col = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.0f32..1.0))).collect();
    PointCloud::new(pos, col).unwrap()
}

fn cloud_tensor(clouds: &[PointCloud]) -> Tensor {
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    ognet::model::batch_input(&refs).unwrap()
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let cases = gradsuite::run("all", SEED).unwrap();
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(300);
    let mut worst_op: f64 = 0.0;
    let mut model_err = f64::NAN;
    for c in &cases {
        println!("  {:<24} {:.3e} (< {:.0e}) {}", c.name, c.max_error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
        pass &= c.passed();
        if c.name == "ogn_small" {
            model_err = c.max_error;
        } else {
            worst_op = worst_op.max(c.max_error);
        }
    }
    report(
        1,
        pass,
        &format!(
            "{} cases, worst op/layer rel err {worst_op:.2e}, OG-Net-Small end-to-end {model_err:.2e}, {:.1}s",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn brute_knn(keys: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    (0..keys.len())
        .map(|i| {
            let mut all: Vec<(f64, [f64; 3], usize)> = (0..keys.len())
                .filter(|&j| j != i)
                .map(|j| ((0..3).map(|a| (keys[i][a] - keys[j][a]).powi(2)).sum(), keys[j], j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()).then(a.2.cmp(&b.2)));
            all.into_iter().take(k).map(|t| t.2).collect()
        })
        .collect()
}

fn brute_fps(pts: &[[f64; 3]], target: usize) -> Vec<usize> {
    let d2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 { (0..3).map(|t| (a[t] - b[t]).powi(2)).sum() };
    let m = pts.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| pts.iter().map(|p| p[a]).sum::<f64>() / m);
    let pick = |score: &dyn Fn(usize) -> f64, cands: &mut dyn Iterator<Item = usize>| -> usize {
        cands
            .max_by(|&a, &b| {
                score(a)
                    .total_cmp(&score(b))
                    .then(pts[b].partial_cmp(&pts[a]).unwrap())
                    .then(b.cmp(&a))
            })
            .unwrap()
    };
    let mut chosen = vec![pick(&|j| d2(&pts[j], &c), &mut (0..pts.len()))];
    while chosen.len() < target {
        let score = |j: usize| chosen.iter().map(|&s| d2(&pts[j], &pts[s])).fold(f64::INFINITY, f64::min);
        let next = pick(&score, &mut (0..pts.len()).filter(|j| !chosen.contains(j)));
        chosen.push(next);
    }
    chosen
}

#[test]
fn criterion_02_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 200;
    let mut fails = [0usize; 5];
    let mut conv_err: f64 = 0.0;
    let mut ap_err: f64 = 0.0;
    for _ in 0..cases {
        let m = rng.random_range(3..40);
        let pts = random_points(&mut rng, m);
        let keys = position_keys(&pts);
        let k = rng.random_range(1..m);
        let g = knn_graph(&keys, 3, k).unwrap();
        let bk = brute_knn(&pts, k);
        if (0..m).any(|i| g.row(i) != bk[i].as_slice()) {
            fails[0] += 1;
        }

        let target = rng.random_range(1..=m);
        if farthest_point_sample(&pts, target).unwrap() != brute_fps(&pts, target) {
            fails[1] += 1;
        }

        let r = rng.random_range(1..=m + 3);
        let groups = nearest_groups(&keys, 3, r).unwrap();
        let full = brute_knn(&pts, m - 1);
        for i in 0..m {
            let mut expect = vec![i];
            expect.extend(full[i].iter().take(r.min(m) - 1));
            expect.resize(r, i);
            if groups[i * r..(i + 1) * r] != expect[..] {
                fails[2] += 1;
                break;
            }
        }

        let (c, d) = (rng.random_range(1..5), rng.random_range(1..5));
        let x = Tensor::from_fn(&[m, c], |_| rng.random_range(-1.0..1.0));
        let ts = Tensor::from_fn(&[c, d], |_| rng.random_range(-1.0..1.0));
        let tn = Tensor::from_fn(&[c, d], |_| rng.random_range(-1.0..1.0));
        let agg = if rng.random_bool(0.5) { Aggregation::Sum } else { Aggregation::Max };
        let mut tape = Tape::new();
        let (xv, sv, nv) = (tape.constant(x.clone()), tape.constant(ts.clone()), tape.constant(tn.clone()));
        let out = dynamic_graph_conv(&mut tape, xv, g.neighbors(), k, sv, nv, agg).unwrap();
        let proj = |row: usize, w: &Tensor, j: usize| -> f64 { (0..c).map(|t| x.data()[row * c + t] * w.data()[t * d + j]).sum() };
        for i in 0..m {
            for j in 0..d {
                // every edge (i, j') contributes theta_i x_i + theta_j x_j'
                let edges = bk[i].iter().map(|&nb| proj(i, &ts, j) + proj(nb, &tn, j));
                let expect = match agg {
                    Aggregation::Sum => edges.sum::<f64>(),
                    Aggregation::Max => edges.fold(f64::NEG_INFINITY, f64::max),
                };
                conv_err = conv_err.max((tape.value(out).data()[i * d + j] - expect).abs());
            }
        }

        let n = rng.random_range(1..=6);
        let q = Tensor::from_fn(&[1, 3], |_| rng.random_range(-1.0..1.0));
        let gal = Tensor::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0));
        let ids: Vec<i64> = (0..n).map(|_| rng.random_range(-1..3)).collect();
        let cams: Vec<i64> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let qs = EmbeddingSet::new(q.clone(), vec![1], vec![0]).unwrap();
        let gs = EmbeddingSet::new(gal.clone(), ids.clone(), cams.clone()).unwrap();
        let got = evaluate(&qs, &gs).unwrap();
        let sims: Vec<f64> = (0..n)
            .map(|i| {
                let gi = &gal.data()[i * 3..i * 3 + 3];
                let dot: f64 = gi.iter().zip(q.data()).map(|(a, b)| a * b).sum();
                dot / (gi.iter().map(|v| v * v).sum::<f64>().sqrt() * q.data().iter().map(|v| v * v).sum::<f64>().sqrt())
            })
            .collect();
        match permutation_ap(&sims, &ids, &cams, 1, 0) {
            Some(ap) => ap_err = ap_err.max((got.map - ap).abs()),
            None => {
                if got.skipped != 1 {
                    fails[4] += 1;
                }
            }
        }
    }
    let pass = fails[..3].iter().all(|&f| f == 0) && fails[4] == 0 && conv_err <= 1e-10 && ap_err <= 1e-10;
    report(
        2,
        pass,
        &format!(
            "{cases} cases each; index mismatches knn {} fps {} grouping {}; graph conv max err {conv_err:.1e}; AP max err {ap_err:.1e}",
            fails[0], fails[1], fails[2]
        ),
    );
    assert!(pass);
}

/// AP by enumerating every gallery order and keeping the similarity-sorted one.
fn permutation_ap(sims: &[f64], ids: &[i64], cams: &[i64], qid: i64, qcam: i64) -> Option<f64> {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        perms(n - 1)
            .into_iter()
            .flat_map(|p| {
                (0..=p.len()).map(move |i| {
                    let mut q = p.clone();
                    q.insert(i, n - 1);
                    q
                })
            })
            .collect()
    }
    let order = perms(sims.len())
        .into_iter()
        .find(|p| p.windows(2).all(|w| sims[w[0]] > sims[w[1]] || (sims[w[0]] == sims[w[1]] && w[0] < w[1])))?;
    let kept: Vec<usize> = order.into_iter().filter(|&g| !(ids[g] == qid && cams[g] == qcam)).collect();
    let rel = kept.iter().filter(|&&g| ids[g] == qid).count();
    if rel == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &g) in kept.iter().enumerate() {
        if ids[g] == qid {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / rel as f64)
}

#[test]
fn criterion_03_shape_contract() {
    let net = OgNet::build(Variant::Ogn, 751, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = cloud_tensor(&[random_cloud(&mut rng, 4096), random_cloud(&mut rng, 4096)]);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &input, Mode::Eval, &mut rng).unwrap();
    let points: Vec<usize> = std::iter::once(4096).chain(out.trace.iter().map(|t| t.points_out)).collect();
    let channels: Vec<usize> = std::iter::once(out.trace[0].channels_in).chain(out.trace.iter().map(|t| t.channels_out)).collect();
    let pooled = tape.shape(out.pooled)[1];
    let emb = tape.shape(out.embedding)[1];
    let pass = points == [4096, 768, 384, 192, 96] && channels == [3, 64, 128, 256, 512] && pooled == 1024 && emb == 512;
    report(3, pass, &format!("points {points:?}, channels {channels:?}, pooled {pooled}, embedding {emb}"));
    assert!(pass);
}

#[test]
fn criterion_04_parameter_counts() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (variant, reference) in [(Variant::Ogn, 1.95e6), (Variant::OgnSmall, 1.20e6), (Variant::OgnDeep, 2.47e6)] {
        let net = OgNet::build(variant, 751, SEED).unwrap();
        let emb = net.count_embedding_parameters();
        let ratio = emb as f64 / reference;
        pass &= (0.8..=1.2).contains(&ratio);
        parts.push(format!(
            "{variant} {emb} ({ratio:.3} of {:.2}M; {} with 751-way classifier)",
            reference / 1e6,
            net.count_parameters()
        ));
    }
    report(
        4,
        pass,
        &format!("{}; branch widths c'->c'/4->c', SE reduction 4", parts.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_05_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = 512;
    let net = OgNet::from_config(OgNetConfig::new(Variant::Ogn, 10).scaled_points(m), SEED).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let clouds: Vec<PointCloud> = (0..10).map(|_| random_cloud(&mut rng, m)).collect();
        let shuffled: Vec<PointCloud> = clouds
            .iter()
            .map(|c| {
                let mut p: Vec<usize> = (0..m).collect();
                for i in (1..m).rev() {
                    p.swap(i, rng.random_range(0..=i));
                }
                c.select(&p).unwrap()
            })
            .collect();
        let a = net.predict(&cloud_tensor(&clouds)).unwrap();
        let b = net.predict(&cloud_tensor(&shuffled)).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    let pass = worst < 1e-5;
    report(5, pass, &format!("50 clouds of {m} points, OG-Net logits max-abs change {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_06_rigid_motion_topology() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut knn_bad, mut fps_bad) = (0, 0);
    let clouds = 50;
    for _ in 0..clouds {
        let m = rng.random_range(16..200);
        let pts = random_points(&mut rng, m);
        // random rotation from a unit quaternion, then a translation
        let q: [f64; 4] = {
            let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.map(|x| x / n)
        };
        let [w, x, y, z] = q;
        let rot = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| std::array::from_fn(|r| (0..3).map(|c| rot[r][c] * p[c]).sum::<f64>() + t[r]))
            .collect();
        let k = 20.min(m - 1);
        let a = knn_graph(&position_keys(&pts), 3, k).unwrap();
        let b = knn_graph(&position_keys(&moved), 3, k).unwrap();
        let edges = |g: &ognet::geometry::KnnGraph| -> Vec<BTreeSet<usize>> {
            (0..m).map(|i| g.row(i).iter().copied().collect()).collect()
        };
        if edges(&a) != edges(&b) {
            knn_bad += 1;
        }
        let target = m * 3 / 8;
        let fa: BTreeSet<usize> = farthest_point_sample(&pts, target).unwrap().into_iter().collect();
        let fb: BTreeSet<usize> = farthest_point_sample(&moved, target).unwrap().into_iter().collect();
        if fa != fb {
            fps_bad += 1;
        }
    }
    let pass = knn_bad == 0 && fps_bad == 0;
    report(
        6,
        pass,
        &format!("{clouds} clouds under random rotation+translation: KNN edge-set changes {knn_bad}, FPS set changes {fps_bad}"),
    );
    assert!(pass);
}

struct Split3 {
    train: Vec<PointCloud>,
    labels: Vec<usize>,
    query: Vec<PointCloud>,
    qid: Vec<i64>,
    qcam: Vec<i64>,
    gallery: Vec<PointCloud>,
    gid: Vec<i64>,
    gcam: Vec<i64>,
}

impl Split3 {
    fn q(&self) -> LabeledClouds<'_> {
        LabeledClouds { clouds: &self.query, identities: &self.qid, cameras: &self.qcam }
    }

    fn g(&self) -> LabeledClouds<'_> {
        LabeledClouds { clouds: &self.gallery, identities: &self.gid, cameras: &self.gcam }
    }

    fn map(&self, net: &OgNet, fraction: f64) -> ognet::eval::RetrievalReport {
        evaluate(&self.q().embed(net, fraction, 11, 36).unwrap(), &self.g().embed(net, fraction, 12, 36).unwrap()).unwrap()
    }
}

fn dataset() -> &'static Split3 {
    static DATA: OnceLock<Split3> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = SyntheticSpec {
            num_identities: 32,
            samples_per_identity: 12,
            points_per_cloud: 1024,
            num_test_identities: 16,
            queries_per_identity: 2,
            gallery_per_identity: 4,
            seed: SEED,
            ..SyntheticSpec::default()
        };
        let mut d = Split3 {
            train: vec![],
            labels: vec![],
            query: vec![],
            qid: vec![],
            qcam: vec![],
            gallery: vec![],
            gid: vec![],
            gcam: vec![],
        };
        for (r, c) in synthesize(&spec).unwrap() {
            match r.split {
                Split::Train => {
                    d.train.push(c);
                    d.labels.push(r.identity as usize);
                }
                Split::Query => {
                    d.query.push(c);
                    d.qid.push(r.identity);
                    d.qcam.push(r.camera);
                }
                Split::Gallery => {
                    d.gallery.push(c);
                    d.gid.push(r.identity);
                    d.gcam.push(r.camera);
                }
            }
        }
        d
    })
}

fn desk_config(classes: usize) -> OgNetConfig {
    OgNetConfig::new(Variant::OgnSmall, classes).scaled_points((1024.0 * EVAL_FRACTION) as usize)
}

struct Trained {
    net: OgNet,
    untrained_map: f64,
    seconds: f64,
}

fn train_desk(cfg: OgNetConfig, loss: LossKind, epochs: usize) -> (OgNet, f64, f64, Vec<ognet::training::EpochStats>) {
    let d = dataset();
    let mut net = OgNet::from_config(cfg, SEED).unwrap();
    let untrained = d.map(&net, EVAL_FRACTION).map;
    let tc = TrainConfig { epochs, loss, seed: SEED, ..TrainConfig::default() };
    let start = Instant::now();
    let report = train(&mut net, &d.train, &d.labels, &tc, None).unwrap();
    (net, untrained, start.elapsed().as_secs_f64(), report.epochs)
}

fn full_model() -> &'static Trained {
    static FULL: OnceLock<Trained> = OnceLock::new();
    FULL.get_or_init(|| {
        let (net, untrained_map, seconds, _) = train_desk(desk_config(32), LossKind::Ce, EPOCHS);
        Trained { net, untrained_map, seconds }
    })
}

#[test]
fn criterion_07_desk_scale_learning() {
    let d = dataset();
    let full = full_model();
    let start = Instant::now();
    let acc = accuracy(&full.net, &d.train, &d.labels, EVAL_FRACTION, 7, 36).unwrap();
    let r = d.map(&full.net, EVAL_FRACTION);
    let seconds = full.seconds + start.elapsed().as_secs_f64();
    // random guess: share of true matches among each query's scored gallery
    let chance: f64 = (0..d.query.len())
        .map(|q| {
            let scored = (0..d.gallery.len()).filter(|&g| !(d.gid[g] == d.qid[q] && d.gcam[g] == d.qcam[q]));
            let (hits, total) = scored.fold((0, 0), |(h, t), g| (h + usize::from(d.gid[g] == d.qid[q]), t + 1));
            hits as f64 / total as f64
        })
        .sum::<f64>()
        / d.query.len() as f64;
    let pass = acc >= 0.95 && r.rank1 >= 3.0 * chance && r.map >= 2.0 * full.untrained_map && seconds < 1800.0;
    report(
        7,
        pass,
        &format!(
            "{EPOCHS} epochs: train acc {acc:.3}; Rank@1 {:.3} vs 3x chance {:.3}; mAP {:.3} vs 2x untrained {:.3}; {seconds:.0}s",
            r.rank1,
            3.0 * chance,
            r.map,
            2.0 * full.untrained_map
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_circle_loss_training() {
    let d = dataset();
    let probe: Vec<PointCloud> = d.train.iter().step_by(10).cloned().collect();
    let probe_labels: Vec<usize> = d.labels.iter().step_by(10).copied().collect();
    let circle_on = |net: &OgNet| -> f64 {
        let sub: Vec<PointCloud> =
            probe.iter().map(|c| ognet::geometry::uniform_subsample(c, EVAL_FRACTION, 1).unwrap()).collect();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward(&mut tape, &cloud_tensor(&sub), Mode::Eval, &mut rng).unwrap();
        let c = circle_loss(&mut tape, out.embedding, &probe_labels, CircleParams::default()).unwrap();
        tape.scalar(c.loss)
    };
    let init = OgNet::from_config(desk_config(32), SEED).unwrap();
    let at_init = circle_on(&init);
    let (net, _, _, epochs) = train_desk(desk_config(32), LossKind::CeCircle, CIRCLE_EPOCHS);
    let after = circle_on(&net);
    let first = epochs[0].circle.unwrap();
    let last = epochs.last().unwrap().circle.unwrap();
    let finite = epochs.iter().all(|e| e.loss.is_finite());
    let pass = finite && epochs.len() == CIRCLE_EPOCHS && at_init > 0.0 && after < at_init && last < first;
    report(
        8,
        pass,
        &format!(
            "ce+circle ran {} epochs; circle term on a fixed batch {at_init:.3} -> {after:.3}; epoch mean {first:.3} -> {last:.3}",
            epochs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_density_sweep() {
    let d = dataset();
    let net = &full_model().net;
    let rows = density_sweep(net, d.q(), d.g(), &[0.25, 0.5, 0.75, 1.0], 11, 36).unwrap();
    let at = |f: f64| rows.iter().find(|r| r.fraction == f).unwrap().map;
    let pass = at(0.5) >= at(0.25) && at(0.5) >= at(1.0) - 0.02;
    let table: Vec<String> = rows.iter().map(|r| format!("{}: R@1 {:.3} mAP {:.3}", r.fraction, r.rank1, r.map)).collect();
    report(9, pass, &table.join(", "));
    assert!(pass);
}

#[test]
fn criterion_10_real_dataset_numbers() {
    println!(
        "criterion 10: NOT REPRODUCIBLE | Market-1501 86.82% R@1 / 69.02% mAP and the real-dataset tables need \
         reconstructed datasets and GPU-scale training; criteria 1-9 and 11 stand in"
    );
}

#[test]
fn criterion_11_component_toggles() {
    let d = dataset();
    let full = full_model();
    let full_map = d.map(&full.net, EVAL_FRACTION).map;
    let mut cfg = desk_config(32);
    cfg.use_se = false;
    cfg.use_graph = false;
    cfg.last_graph = GraphKeys::Position;
    let (ablated, _, _, _) = train_desk(cfg, LossKind::Ce, EPOCHS);
    let ablated_map = d.map(&ablated, EVAL_FRACTION).map;
    let pass = ablated_map <= full_map;
    report(
        11,
        pass,
        &format!("mAP without SE, graph conv and non-local graph {ablated_map:.3} vs full model {full_map:.3}"),
    );
    assert!(pass);
}
