//! Network building blocks: linear and batch-norm layers, the dynamic graph
//! convolution, the squeeze-excitation gate, grouping branches and the
//! Omni-scale module.
//!
//! Activations of a batch of `n` clouds with `m` points each are stored as a
//! single `[n * m, c]` tensor; per-point index tables are global row indices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_graph, nearest_groups};
use crate::params::{BnId, Forward, ParamId, ParamStore};
use crate::tensor::{Reduce, Tape, Var};

/// SE bottleneck reduction ratio.
pub const SE_REDUCTION: usize = 4;
/// Branch hidden width is `c' / BRANCH_BOTTLENECK`.
pub const BRANCH_BOTTLENECK: usize = 4;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_kaiming(format!("{name}.weight"), c_in, c_out, rng);
        let b = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                crate::tensor::Tensor::zeros(&[c_out]),
            )
        });
        Self { w, b, c_in, c_out }
    }

    /// Linear layer with `N(0, std²)` weights.
    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.weight"), &[c_in, c_out], std, rng);
        let b = Some(store.add(
            format!("{name}.bias"),
            crate::tensor::Tensor::zeros(&[c_out]),
        ));
        Self { w, b, c_in, c_out }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let b = self.b.map(|b| fx.var(b));
        let w = fx.var(self.w);
        fx.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: BnId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        use crate::tensor::Tensor;
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            stats: store.add_running(name, c),
        }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn forward(&self, fx: &mut Forward<'_>, store: &ParamStore, x: Var) -> Result<Var> {
        let running = store.running(self.stats);
        let (g, b) = (fx.var(self.gamma), fx.var(self.beta));
        let mode = fx.mode;
        let (y, stats) = fx
            .tape
            .batch_norm(x, g, b, (&running.mean, &running.var), mode)?;
        if let Some(stats) = stats {
            fx.bn_updates.push((self.stats, stats));
        }
        Ok(y)
    }

    /// Normalizes `x` and returns `(max over each run of r rows, mean over
    /// each of `segments` row blocks)` of the normalized values.
    pub fn forward_group_pool(
        &self,
        fx: &mut Forward<'_>,
        store: &ParamStore,
        x: Var,
        r: usize,
        segments: usize,
    ) -> Result<(Var, Var)> {
        let running = store.running(self.stats);
        let (g, b) = (fx.var(self.gamma), fx.var(self.beta));
        let mode = fx.mode;
        let (y, stats) = fx
            .tape
            .bn_group_pool(x, g, b, (&running.mean, &running.var), mode, r, segments)?;
        if let Some(stats) = stats {
            fx.bn_updates.push((self.stats, stats));
        }
        let groups = fx.tape.value(y).rows() - segments;
        let parts = fx.tape.split(y, 0, &[groups, segments])?;
        Ok((parts[0], parts[1]))
    }
}

/// Neighbor aggregation of the graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// `x'_i = sum_j (θ_i x_i + θ_j x_j)` over the `k` neighbors.
    Sum,
    /// `x'_i = max_j (θ_i x_i + θ_j x_j)`, the EdgeConv-style reduction.
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq1_sum" | "sum" => Ok(Aggregation::Sum),
            "edgeconv_max" | "max" => Ok(Aggregation::Max),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Sum => "eq1_sum",
            Aggregation::Max => "edgeconv_max",
        }
    }
}

/// Graph convolution without normalization: `neighbors` is a flat table of
/// `k` global row indices per output row (self excluded).
pub fn dynamic_graph_conv(
    tape: &mut Tape,
    x: Var,
    neighbors: &[usize],
    k: usize,
    theta_self: Var,
    theta_nbr: Var,
    aggregation: Aggregation,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    if neighbors.len() != rows * k {
        return Err(Error::Shape(format!(
            "graph has {} entries, expected {rows} rows x k={k}",
            neighbors.len()
        )));
    }
    let own = tape.linear(x, theta_self, None)?;
    let other = tape.linear(x, theta_nbr, None)?;
    match aggregation {
        Aggregation::Sum => {
            let agg = tape.neighbor_reduce(other, neighbors, k, Reduce::Sum)?;
            let own = tape.scale(own, k as f64);
            tape.add(own, agg)
        }
        Aggregation::Max => {
            let agg = tape.neighbor_reduce(other, neighbors, k, Reduce::Max)?;
            tape.add(own, agg)
        }
    }
}

/// Squeeze-excitation: per-sample channel gate
/// `sigmoid(W2 relu(W1 mean(x)))` applied to `x` viewed as `[groups, L, c]`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    fc1: Linear,
    fc2: Linear,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || c % reduction != 0 {
            return Err(Error::Config(format!(
                "SE channels {c} not divisible by reduction {reduction}"
            )));
        }
        let hidden = c / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, true, rng),
        })
    }

    pub fn fc1(&self) -> &Linear {
        &self.fc1
    }

    pub fn fc2(&self) -> &Linear {
        &self.fc2
    }

    /// Returns `(output, gate)`.
    pub fn forward(&self, fx: &mut Forward<'_>, x: Var, groups: usize) -> Result<(Var, Var)> {
        let numel = fx.tape.value(x).numel();
        let c = fx.tape.value(x).last_dim();
        if groups == 0 || numel % (groups * c) != 0 {
            return Err(Error::Shape(format!(
                "cannot split {numel} values into {groups} groups of width {c}"
            )));
        }
        let view = fx.tape.reshape(x, &[groups, numel / (groups * c), c])?;
        let squeezed = fx.tape.mean_axis(view, 1)?;
        let gate = self.gate(fx, squeezed)?;
        Ok((fx.tape.channel_scale(x, gate)?, gate))
    }

    /// `sigmoid(W2 relu(W1 squeezed))` for per-group means `[groups, c]`.
    pub fn gate(&self, fx: &mut Forward<'_>, squeezed: Var) -> Result<Var> {
        let h = self.fc1.forward(fx, squeezed)?;
        let h = fx.tape.relu(h);
        let h = self.fc2.forward(fx, h)?;
        Ok(fx.tape.sigmoid(h))
    }

    /// Scales `x` by the gate computed from precomputed group means.
    pub fn apply(&self, fx: &mut Forward<'_>, x: Var, means: Var, groups: usize) -> Result<Var> {
        if fx.tape.shape(means).first() != Some(&groups) {
            return Err(Error::Shape(format!(
                "SE means {:?} do not match {groups} groups",
                fx.tape.shape(means)
            )));
        }
        let gate = self.gate(fx, means)?;
        fx.tape.channel_scale(x, gate)
    }
}

/// One grouping branch: per-member MLP (linear, BN, ReLU, linear, BN),
/// optional SE gate, then max over the `r` members of each group.
#[derive(Debug, Clone)]
pub struct GroupingBranch {
    pub rate: usize,
    lin1: Linear,
    bn1: BatchNorm,
    lin2: Linear,
    bn2: BatchNorm,
    se: Option<SeBlock>,
}

impl GroupingBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        hidden: usize,
        rate: usize,
        use_se: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            rate,
            lin1: Linear::new(store, &format!("{name}.lin1"), c, hidden, true, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), hidden),
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, c, true, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c),
            se: if use_se {
                Some(SeBlock::new(store, &format!("{name}.se"), c, SE_REDUCTION, rng)?)
            } else {
                None
            },
        })
    }

    pub fn bn2(&self) -> &BatchNorm {
        &self.bn2
    }

    pub fn se(&self) -> Option<&SeBlock> {
        self.se.as_ref()
    }

    pub fn lin1(&self) -> &Linear {
        &self.lin1
    }

    pub fn lin2(&self) -> &Linear {
        &self.lin2
    }

    /// `groups` holds `rate` global row indices per point (`n * m` points).
    pub fn forward(
        &self,
        fx: &mut Forward<'_>,
        store: &ParamStore,
        x: Var,
        groups: &[usize],
        n: usize,
    ) -> Result<Var> {
        self.forward_rate(fx, store, x, groups, self.rate, n)
    }

    /// Like [`GroupingBranch::forward`] with groups of `r` members, used when
    /// a cloud has fewer points than the configured rate.
    pub fn forward_rate(
        &self,
        fx: &mut Forward<'_>,
        store: &ParamStore,
        x: Var,
        groups: &[usize],
        r: usize,
        n: usize,
    ) -> Result<Var> {
        let points = fx.tape.value(x).rows();
        if r == 0 || groups.len() != points * r {
            return Err(Error::Shape(format!(
                "group table has {} entries, expected {points} x {r}",
                groups.len()
            )));
        }
        // The first linear acts per point, so it commutes with the gather.
        let h = self.lin1.forward(fx, x)?;
        let h = fx.tape.gather_rows(h, groups)?;
        let h = self.bn1.forward(fx, store, h)?;
        let h = fx.tape.relu(h);
        let h = self.lin2.forward(fx, h)?;
        let (pooled, means) = self.bn2.forward_group_pool(fx, store, h, r, n)?;
        match &self.se {
            // The gate is positive, so scaling after the group max is exact.
            Some(se) => se.apply(fx, pooled, means, n),
            None => Ok(pooled),
        }
    }
}

/// Which keys build a module's KNN graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKeys {
    Position,
    /// Appearance features concatenated with the 3D position.
    AppearancePosition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Points kept by farthest point sampling; `None` keeps all points.
    pub target: Option<usize>,
    pub k: usize,
    pub rates: Vec<usize>,
    pub shortcut: bool,
    pub keys: GraphKeys,
    pub aggregation: Aggregation,
    /// `false` replaces the graph convolution by a per-point linear layer.
    pub use_graph: bool,
    pub use_se: bool,
}

#[derive(Debug, Clone)]
enum PointConv {
    Graph {
        theta_self: ParamId,
        theta_nbr: ParamId,
    },
    Linear(Linear),
}

/// A batch of point positions, `n` clouds of `m` points each.
#[derive(Debug, Clone, PartialEq)]
pub struct Positions {
    pub n: usize,
    pub m: usize,
    pub xyz: Vec<[f64; 3]>,
}

impl Positions {
    pub fn new(n: usize, m: usize, xyz: Vec<[f64; 3]>) -> Result<Self> {
        if n == 0 || m == 0 || xyz.len() != n * m {
            return Err(Error::Shape(format!(
                "{} positions do not form {n} clouds of {m} points",
                xyz.len()
            )));
        }
        Ok(Self { n, m, xyz })
    }

    pub fn cloud(&self, s: usize) -> &[[f64; 3]] {
        &self.xyz[s * self.m..(s + 1) * self.m]
    }
}

/// Per-module trace of the selected points, used by instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleTrace {
    pub points_in: usize,
    pub points_out: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Per-sample FPS selections (local indices), when downsampling.
    pub selected: Option<Vec<Vec<usize>>>,
    /// Per-sample KNN rows (local indices), when a graph is built.
    pub graph: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct OmniScaleModule {
    pub config: ModuleConfig,
    conv: PointConv,
    conv_bn: BatchNorm,
    branches: Vec<GroupingBranch>,
}

impl OmniScaleModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: ModuleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.shortcut && config.c_in != config.c_out {
            return Err(Error::Config(format!(
                "{name}: shortcut needs equal widths, got {} -> {}",
                config.c_in, config.c_out
            )));
        }
        if config.rates.is_empty() || config.rates.contains(&0) {
            return Err(Error::Config(format!("{name}: bad grouping rates {:?}", config.rates)));
        }
        if config.k == 0 && config.use_graph {
            return Err(Error::Config(format!("{name}: k must be >= 1")));
        }
        let (c_in, c_out) = (config.c_in, config.c_out);
        let conv = if config.use_graph {
            PointConv::Graph {
                theta_self: store.add_kaiming(format!("{name}.conv.theta_self"), c_in, c_out, rng),
                theta_nbr: store.add_kaiming(format!("{name}.conv.theta_nbr"), c_in, c_out, rng),
            }
        } else {
            PointConv::Linear(Linear::new(store, &format!("{name}.conv.linear"), c_in, c_out, true, rng))
        };
        let conv_bn = BatchNorm::new(store, &format!("{name}.conv.bn"), c_out);
        let hidden = (c_out / BRANCH_BOTTLENECK).max(1);
        let branches = config
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                GroupingBranch::new(
                    store,
                    &format!("{name}.branch{i}"),
                    c_out,
                    hidden,
                    r,
                    config.use_se,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            conv,
            conv_bn,
            branches,
        })
    }

    pub fn branches(&self) -> &[GroupingBranch] {
        &self.branches
    }

    /// Graph-convolution weights `(θ_i, θ_j)`, if the module uses a graph.
    pub fn graph_weights(&self) -> Option<(ParamId, ParamId)> {
        match &self.conv {
            PointConv::Graph {
                theta_self,
                theta_nbr,
            } => Some((*theta_self, *theta_nbr)),
            PointConv::Linear(_) => None,
        }
    }

    pub fn conv_bn(&self) -> &BatchNorm {
        &self.conv_bn
    }

    /// Builds the per-sample KNN graph and returns global neighbor rows.
    fn build_graph(
        &self,
        tape: &Tape,
        x: Var,
        pos: &Positions,
        k: usize,
    ) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let (n, m) = (pos.n, pos.m);
        let feats = tape.data(x);
        let c = tape.value(x).last_dim();
        let mut global = Vec::with_capacity(n * m * k);
        let mut local = Vec::with_capacity(n);
        for s in 0..n {
            let keys: Vec<f64> = match self.config.keys {
                GraphKeys::Position => pos.cloud(s).iter().flatten().copied().collect(),
                GraphKeys::AppearancePosition => (0..m)
                    .flat_map(|i| {
                        let row = s * m + i;
                        feats[row * c..(row + 1) * c]
                            .iter()
                            .chain(pos.xyz[row].iter())
                            .copied()
                    })
                    .collect(),
            };
            let dim = match self.config.keys {
                GraphKeys::Position => 3,
                GraphKeys::AppearancePosition => c + 3,
            };
            let g = knn_graph(&keys, dim, k)?;
            global.extend(g.neighbors().iter().map(|&j| s * m + j));
            local.push(g.neighbors().to_vec());
        }
        Ok((global, local))
    }

    /// Maps `(features [n*m, c_in], positions)` to
    /// `(features [n*m', c_out], selected positions, trace)`.
    pub fn forward(
        &self,
        fx: &mut Forward<'_>,
        store: &ParamStore,
        x: Var,
        pos: &Positions,
    ) -> Result<(Var, Positions, ModuleTrace)> {
        let (n, m) = (pos.n, pos.m);
        let shape = fx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != n * m || shape[1] != self.config.c_in {
            return Err(Error::Shape(format!(
                "module expects [{}, {}], got {shape:?}",
                n * m,
                self.config.c_in
            )));
        }
        let mut trace = ModuleTrace {
            points_in: m,
            points_out: m,
            channels_in: self.config.c_in,
            channels_out: self.config.c_out,
            selected: None,
            graph: None,
        };

        let h = match &self.conv {
            PointConv::Graph {
                theta_self,
                theta_nbr,
            } => {
                if m < 2 {
                    return Err(Error::Shape("graph convolution needs >= 2 points".into()));
                }
                let k = self.config.k.min(m - 1);
                let (global, local) = self.build_graph(fx.tape, x, pos, k)?;
                trace.graph = Some(local);
                let (ts, tn) = (fx.var(*theta_self), fx.var(*theta_nbr));
                dynamic_graph_conv(fx.tape, x, &global, k, ts, tn, self.config.aggregation)?
            }
            PointConv::Linear(lin) => lin.forward(fx, x)?,
        };
        let h = self.conv_bn.forward(fx, store, h)?;
        let mut h = fx.tape.relu(h);

        let mut shortcut = x;
        let out_pos = match self.config.target {
            Some(target) => {
                if target > m {
                    return Err(Error::Config(format!(
                        "downsample target {target} exceeds {m} input points"
                    )));
                }
                let mut global = Vec::with_capacity(n * target);
                let mut local = Vec::with_capacity(n);
                let mut xyz = Vec::with_capacity(n * target);
                for s in 0..n {
                    let sel = farthest_point_sample(pos.cloud(s), target)?;
                    global.extend(sel.iter().map(|&j| s * m + j));
                    xyz.extend(sel.iter().map(|&j| pos.xyz[s * m + j]));
                    local.push(sel);
                }
                h = fx.tape.gather_rows(h, &global)?;
                if self.config.shortcut {
                    shortcut = fx.tape.gather_rows(x, &global)?;
                }
                trace.selected = Some(local);
                trace.points_out = target;
                Positions::new(n, target, xyz)?
            }
            None => pos.clone(),
        };

        let m_out = out_pos.m;
        let max_rate = (*self.config.rates.iter().max().unwrap()).min(m_out);
        let mut table = Vec::with_capacity(n * m_out * max_rate);
        for s in 0..n {
            let keys: Vec<f64> = out_pos.cloud(s).iter().flatten().copied().collect();
            let local = nearest_groups(&keys, 3, max_rate)?;
            table.extend(local.iter().map(|&j| s * m_out + j));
        }

        let mut out: Option<Var> = None;
        for branch in &self.branches {
            let r = branch.rate.min(m_out);
            // Shorter rates are prefixes of the canonical neighbor order.
            let groups: Vec<usize> = table
                .chunks_exact(max_rate)
                .flat_map(|row| row[..r].iter().copied())
                .collect();
            let y = branch.forward_rate(fx, store, h, &groups, r, n)?;
            out = Some(match out {
                Some(acc) => fx.tape.add(acc, y)?,
                None => y,
            });
        }
        let mut out = out.expect("at least one branch");
        if self.config.shortcut {
            out = fx.tape.add(out, shortcut)?;
        }
        Ok((out, out_pos, trace))
    }
}
