use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tape::{accumulate, Mode, Node, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics observed by a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Max,
}

pub(super) enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    /// Batch norm followed by a max over each group of `r` rows and a mean
    /// over each of `segments` equal row blocks; only the reductions are kept.
    BnGroupPool {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        argmax: Vec<usize>,
        segment_sums: Vec<f64>,
        segments: usize,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        total: usize,
        start: usize,
        width: usize,
    },
    Mean {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    NeighborSum {
        x: Var,
        index: Vec<usize>,
        k: usize,
    },
    NeighborMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelScale {
        x: Var,
        gate: Var,
        groups: usize,
    },
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    /// Scalar whose gradient with respect to `x` was computed during forward.
    ScalarWithGrad {
        x: Var,
        dx: Vec<f64>,
    },
}

fn dims_mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

/// `c = beta * c + op(a) * op(b)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a = ArrayView2::from_shape(a_dims, a).expect("gemm lhs");
    let b = ArrayView2::from_shape(b_dims, b).expect("gemm rhs");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm out");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Splits `shape` around `axis` into (outer, mid, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tape {
    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Shape(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// `y = x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let c_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != c_in {
            return Err(dims_mismatch("linear", &xs, &ws));
        }
        let c_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dims_mismatch("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * c_out];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(c_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            self.data(x),
            (rows, c_in),
            false,
            self.data(w),
            (c_in, c_out),
            false,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        let needs = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(tensor(shape, out), Op::Linear { x, w, b }, needs))
    }

    /// Per-channel normalization over every row of `x` (all axes but the last).
    ///
    /// Train mode normalizes by the biased batch variance and returns the batch
    /// statistics; eval mode uses `running = (mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dims_mismatch("batch_norm", &xs, self.shape(gamma)));
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(dims_mismatch("batch_norm running stats", &xs, &[running.0.len()]));
        }
        let rows = self.value(x).rows();
        let data = self.data(x);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::BatchSize {
                        op: "batch_norm",
                        min: 2,
                        got: rows,
                    });
                }
                let mut mean = vec![0.0; c];
                for row in data.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in data.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                let unbiased = var.iter().map(|s| s / (rows - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running.0.to_vec(), running.1.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for ((xr, hr), or) in data
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = g[j] * h + bt[j];
            }
        }
        let needs = self.any_grad(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        Ok((self.push(tensor(xs, out), op, needs), stats))
    }

    /// Fused `y = batch_norm(x)` followed by two reductions of `y`, returned
    /// stacked as one `[groups + segments, c]` tensor: first the max over
    /// each run of `r` consecutive rows, then the mean over each of
    /// `segments` equal row blocks. `y` itself is never materialized.
    #[allow(clippy::too_many_arguments)]
    pub fn bn_group_pool(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        mode: Mode,
        r: usize,
        segments: usize,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        let rows = self.value(x).rows();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dims_mismatch("bn_group_pool", &xs, self.shape(gamma)));
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(dims_mismatch("bn_group_pool running stats", &xs, &[running.0.len()]));
        }
        if r == 0 || segments == 0 || rows % r != 0 || rows % segments != 0 || (rows / segments) % r != 0 {
            return Err(Error::Shape(format!(
                "bn_group_pool: {rows} rows do not split into groups of {r} and {segments} segments"
            )));
        }
        let data = self.data(x);
        let seg_rows = rows / segments;
        let mut segment_sums = vec![0.0; segments * c];
        for (s, block) in data.chunks_exact(seg_rows * c).enumerate() {
            let dst = &mut segment_sums[s * c..(s + 1) * c];
            for row in block.chunks_exact(c) {
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::BatchSize {
                        op: "bn_group_pool",
                        min: 2,
                        got: rows,
                    });
                }
                let mut mean = vec![0.0; c];
                for ss in segment_sums.chunks_exact(c) {
                    mean.iter_mut().zip(ss).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in data.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                let unbiased = var.iter().map(|s| s / (rows - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running.0.to_vec(), running.1.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let scale: Vec<f64> = g.iter().zip(&inv_std).map(|(a, b)| a * b).collect();
        let groups = rows / r;
        let mut out = vec![0.0; (groups + segments) * c];
        let mut argmax = vec![0usize; groups * c];
        // The affine map is monotone per channel: a positive scale keeps the
        // max of x, a negative one turns the min of x into the max of y.
        let mut best_v = vec![0.0; c];
        for p in 0..groups {
            let base = p * r;
            let arg = &mut argmax[p * c..(p + 1) * c];
            let first = &data[base * c..(base + 1) * c];
            for j in 0..c {
                best_v[j] = first[j] * scale[j];
                arg[j] = base;
            }
            for t in 1..r {
                let row = &data[(base + t) * c..(base + t + 1) * c];
                for j in 0..c {
                    let v = row[j] * scale[j];
                    if v > best_v[j] {
                        best_v[j] = v;
                        arg[j] = base + t;
                    }
                }
            }
            for j in 0..c {
                out[p * c + j] = scale[j] * (data[arg[j] * c + j] - mean[j]) + bt[j];
            }
        }
        for s in 0..segments {
            for j in 0..c {
                let avg = segment_sums[s * c + j] / seg_rows as f64;
                out[(groups + s) * c + j] = scale[j] * (avg - mean[j]) + bt[j];
            }
        }
        let needs = self.any_grad(&[x, gamma, beta]);
        let op = Op::BnGroupPool {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            argmax,
            segment_sums,
            segments,
            train: mode == Mode::Train,
        };
        Ok((self.push(tensor(vec![groups + segments, c], out), op, needs), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let needs = self.requires_grad(x);
        self.push(tensor(self.shape(x).to_vec(), out), Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let needs = self.requires_grad(x);
        self.push(tensor(self.shape(x).to_vec(), out), Op::Sigmoid { x }, needs)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`; eval mode is the identity.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p={p} outside [0,1)")));
        }
        let n = self.value(x).numel();
        let mask: Vec<f64> = match mode {
            Mode::Eval => vec![1.0; n],
            Mode::Train => {
                let keep = 1.0 / (1.0 - p);
                (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect()
            }
        };
        let out = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let needs = self.requires_grad(x);
        Ok(self.push(tensor(self.shape(x).to_vec(), out), Op::Dropout { x, mask }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dims_mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(tensor(self.shape(a).to_vec(), out), Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dims_mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(tensor(self.shape(a).to_vec(), out), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let needs = self.requires_grad(x);
        self.push(tensor(self.shape(x).to_vec(), out), Op::Scale { x, factor }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(dims_mismatch("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        let needs = self.requires_grad(x);
        Ok(self.push(tensor(shape.to_vec(), out), Op::Reshape { x }, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dims_mismatch("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let needs = self.any_grad(parts);
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            widths,
        };
        Ok(self.push(tensor(shape, out), op, needs))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis("split", x, axis)?;
        let shape = self.shape(x).to_vec();
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.contains(&0) {
            return Err(dims_mismatch("split", &shape, sizes));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let total = mid * inner;
        let needs = self.requires_grad(x);
        let mut start = 0;
        let mut outs = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let width = s * inner;
            let data = self.data(x);
            let mut out = Vec::with_capacity(outer * width);
            for o in 0..outer {
                out.extend_from_slice(&data[o * total + start..o * total + start + width]);
            }
            let mut sh = shape.clone();
            sh[axis] = s;
            let op = Op::Slice {
                x,
                outer,
                total,
                start,
                width,
            };
            outs.push(self.push(tensor(sh, out), op, needs));
            start += width;
        }
        Ok(outs)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, mid, inner) = split_axis(&shape, axis);
        let data = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let src = &data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= mid as f64);
        }
        let needs = self.requires_grad(x);
        let op = Op::Mean {
            x,
            outer,
            mid,
            inner,
        };
        Ok(self.push(tensor(reduced_shape(&shape, axis), out), op, needs))
    }

    /// Maximum along `axis`. Ties resolve to the lowest index, which alone receives gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, mid, inner) = split_axis(&shape, axis);
        let data = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    let v = data[base + i];
                    let slot = o * inner + i;
                    if m == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = base + i;
                    }
                }
            }
        }
        let needs = self.requires_grad(x);
        Ok(self.push(
            tensor(reduced_shape(&shape, axis), out),
            Op::Max { x, argmax },
            needs,
        ))
    }

    /// Row gather over the `[rows, last]` view of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let c = self.value(x).last_dim();
        let rows = self.value(x).rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather index {bad} >= {rows} rows")));
        }
        if index.is_empty() {
            return Err(Error::Shape("gather with empty index".into()));
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let needs = self.requires_grad(x);
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(tensor(vec![index.len(), c], out), op, needs))
    }

    /// Reduces groups of `k` gathered rows: `out[i] = reduce_t x[index[i*k + t]]`.
    pub fn neighbor_reduce(
        &mut self,
        x: Var,
        index: &[usize],
        k: usize,
        reduce: Reduce,
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        let rows = self.value(x).rows();
        if k == 0 || index.is_empty() || index.len() % k != 0 {
            return Err(Error::Shape(format!(
                "neighbor index of length {} is not a multiple of k={k}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("neighbor index {bad} >= {rows} rows")));
        }
        let out_rows = index.len() / k;
        let data = self.data(x);
        let mut out = vec![0.0; out_rows * c];
        let needs = self.requires_grad(x);
        let op = match reduce {
            Reduce::Sum => {
                for (dst, nbrs) in out.chunks_exact_mut(c).zip(index.chunks_exact(k)) {
                    for &j in nbrs {
                        for (d, s) in dst.iter_mut().zip(&data[j * c..(j + 1) * c]) {
                            *d += s;
                        }
                    }
                }
                Op::NeighborSum {
                    x,
                    index: index.to_vec(),
                    k,
                }
            }
            Reduce::Max => {
                let mut argmax = vec![0usize; out_rows * c];
                for (r, nbrs) in index.chunks_exact(k).enumerate() {
                    for (t, &j) in nbrs.iter().enumerate() {
                        for ch in 0..c {
                            let v = data[j * c + ch];
                            let slot = r * c + ch;
                            if t == 0 || v > out[slot] {
                                out[slot] = v;
                                argmax[slot] = j * c + ch;
                            }
                        }
                    }
                }
                Op::NeighborMax { x, argmax }
            }
        };
        Ok(self.push(tensor(vec![out_rows, c], out), op, needs))
    }

    /// Scales `x` viewed as `[groups, L, c]` by a per-group channel gate `[groups, c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let gs = self.shape(gate).to_vec();
        let xs = self.shape(x).to_vec();
        if gs.len() != 2 || *xs.last().unwrap() != gs[1] {
            return Err(dims_mismatch("channel_scale", &xs, &gs));
        }
        let (groups, c) = (gs[0], gs[1]);
        let n = self.value(x).numel();
        if n % (groups * c) != 0 {
            return Err(dims_mismatch("channel_scale", &xs, &gs));
        }
        let per_group = n / groups;
        let gd = self.data(gate);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[(i / per_group) * c + i % c])
            .collect();
        let needs = self.any_grad(&[x, gate]);
        Ok(self.push(tensor(xs, out), Op::ChannelScale { x, gate, groups }, needs))
    }

    /// Scalar `sum_i x_i * w_i`.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(dims_mismatch("dot", self.shape(x), &[weights.len()]));
        }
        let s = self.data(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        let needs = self.requires_grad(x);
        let op = Op::Dot {
            x,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// Unit Euclidean norm per row of the `[rows, last]` view.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let data = self.data(x);
        let mut norms = Vec::with_capacity(data.len() / c);
        let mut out = Vec::with_capacity(data.len());
        for (r, row) in data.chunks_exact(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {norm}")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let needs = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(tensor(shape, out), Op::L2Normalize { x, norms }, needs))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dims_mismatch("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let probs = softmax_rows(self.data(logits), k);
        let mut loss = 0.0;
        let mut dx = probs;
        for (i, &y) in labels.iter().enumerate() {
            let row = &self.data(logits)[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            dx[i * k + y] -= 1.0;
        }
        dx.iter_mut().for_each(|d| *d /= n as f64);
        Ok(self.scalar_with_grad(logits, loss / n as f64, dx))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `x`.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, dx: Vec<f64>) -> Var {
        assert_eq!(dx.len(), self.value(x).numel(), "gradient length");
        let needs = self.requires_grad(x);
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { x, dx }, needs)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a flat `[rows, k]` buffer.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|z| (z - max).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= s);
    }
    out
}

impl Op {
    pub(super) fn backward(
        &self,
        me: usize,
        g: &[f64],
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let out = &nodes[me].value;
        let val = |v: Var| nodes[v.index()].value.data();
        match self {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = &nodes[x.index()].value;
                let c_in = xv.last_dim();
                let rows = xv.rows();
                let c_out = out.last_dim();
                accumulate(nodes, grads, *x, |dx| {
                    gemm(g, (rows, c_out), false, val(*w), (c_in, c_out), true, dx, 1.0)
                });
                accumulate(nodes, grads, *w, |dw| {
                    gemm(val(*x), (rows, c_in), true, g, (rows, c_out), false, dw, 1.0)
                });
                if let Some(b) = b {
                    accumulate(nodes, grads, *b, |db| {
                        for row in g.chunks_exact(c_out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = out.last_dim();
                let rows = out.rows() as f64;
                let gm = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gh[j] += gr[j] * hr[j];
                    }
                }
                accumulate(nodes, grads, *gamma, |d| {
                    d.iter_mut().zip(&sum_gh).for_each(|(a, b)| *a += b)
                });
                accumulate(nodes, grads, *beta, |d| {
                    d.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b)
                });
                accumulate(nodes, grads, *x, |dx| {
                    for ((dr, gr), hr) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for j in 0..c {
                            let s = gm[j] * inv_std[j];
                            dr[j] += if *train {
                                s * (gr[j] - sum_g[j] / rows - hr[j] * sum_gh[j] / rows)
                            } else {
                                s * gr[j]
                            };
                        }
                    }
                });
            }
            Op::BnGroupPool {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                argmax,
                segment_sums,
                segments,
                train,
            } => {
                let xv = val(*x);
                let c = out.last_dim();
                let rows = nodes[x.index()].value.rows();
                let segs = *segments;
                let groups = out.rows() - segs;
                let seg_rows = rows / segs;
                let (gp, gs) = g.split_at(groups * c);
                let gm = val(*gamma);
                let xhat = |row: usize, j: usize| (xv[row * c + j] - mean[j]) * inv_std[j];
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for p in 0..groups {
                    for j in 0..c {
                        let gv = gp[p * c + j];
                        sum_g[j] += gv;
                        sum_gh[j] += gv * xhat(argmax[p * c + j], j);
                    }
                }
                for s in 0..segs {
                    for j in 0..c {
                        let gv = gs[s * c + j];
                        let avg_hat = (segment_sums[s * c + j] / seg_rows as f64 - mean[j]) * inv_std[j];
                        sum_g[j] += gv;
                        sum_gh[j] += gv * avg_hat;
                    }
                }
                accumulate(nodes, grads, *gamma, |d| {
                    d.iter_mut().zip(&sum_gh).for_each(|(a, b)| *a += b)
                });
                accumulate(nodes, grads, *beta, |d| {
                    d.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b)
                });
                accumulate(nodes, grads, *x, |dx| {
                    // dx = a[segment] + b * x per channel.
                    let n = rows as f64;
                    let scale: Vec<f64> = gm.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                    let (b, shift): (Vec<f64>, Vec<f64>) = if *train {
                        (0..c)
                            .map(|j| {
                                let b = -scale[j] * sum_gh[j] / n * inv_std[j];
                                (b, -scale[j] * sum_g[j] / n - b * mean[j])
                            })
                            .unzip()
                    } else {
                        (vec![0.0; c], vec![0.0; c])
                    };
                    for (seg, block) in dx.chunks_exact_mut(seg_rows * c).enumerate() {
                        let a: Vec<f64> = (0..c)
                            .map(|j| scale[j] * gs[seg * c + j] / seg_rows as f64 + shift[j])
                            .collect();
                        let xs = &xv[seg * seg_rows * c..(seg + 1) * seg_rows * c];
                        for (drow, xrow) in block.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                            for j in 0..c {
                                drow[j] += a[j] + b[j] * xrow[j];
                            }
                        }
                    }
                    for p in 0..groups {
                        for j in 0..c {
                            dx[argmax[p * c + j] * c + j] += scale[j] * gp[p * c + j];
                        }
                    }
                });
            }
            Op::Relu { x } => accumulate(nodes, grads, *x, |dx| {
                for ((d, gv), o) in dx.iter_mut().zip(g).zip(out.data()) {
                    if *o > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Sigmoid { x } => accumulate(nodes, grads, *x, |dx| {
                for ((d, gv), o) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * o * (1.0 - o);
                }
            }),
            Op::Dropout { x, mask } => accumulate(nodes, grads, *x, |dx| {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    accumulate(nodes, grads, v, |d| {
                        d.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                    });
                }
            }
            Op::Mul { a, b } => {
                accumulate(nodes, grads, *a, |d| {
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * o;
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale { x, factor } => accumulate(nodes, grads, *x, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor)
            }),
            Op::Reshape { x } => accumulate(nodes, grads, *x, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv)
            }),
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    accumulate(nodes, grads, p, |d| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (a, b) in d[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                total,
                start,
                width,
            } => accumulate(nodes, grads, *x, |dx| {
                for o in 0..*outer {
                    let dst = &mut dx[o * total + start..o * total + start + width];
                    for (a, b) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *a += b;
                    }
                }
            }),
            Op::Mean {
                x,
                outer,
                mid,
                inner,
            } => accumulate(nodes, grads, *x, |dx| {
                let scale = 1.0 / *mid as f64;
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for m in 0..*mid {
                        let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b * scale;
                        }
                    }
                }
            }),
            Op::Max { x, argmax } | Op::NeighborMax { x, argmax } => {
                accumulate(nodes, grads, *x, |dx| {
                    for (&src, gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                })
            }
            Op::GatherRows { x, index } => accumulate(nodes, grads, *x, |dx| {
                let c = out.last_dim();
                for (&i, gr) in index.iter().zip(g.chunks_exact(c)) {
                    for (a, b) in dx[i * c..(i + 1) * c].iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }),
            Op::NeighborSum { x, index, k } => accumulate(nodes, grads, *x, |dx| {
                let c = out.last_dim();
                for (nbrs, gr) in index.chunks_exact(*k).zip(g.chunks_exact(c)) {
                    for &j in nbrs {
                        for (a, b) in dx[j * c..(j + 1) * c].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }),
            Op::ChannelScale { x, gate, groups } => {
                let gd = val(*gate);
                let c = gd.len() / groups;
                let per_group = g.len() / groups;
                accumulate(nodes, grads, *x, |dx| {
                    for (i, (d, gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gv * gd[(i / per_group) * c + i % c];
                    }
                });
                accumulate(nodes, grads, *gate, |dg| {
                    for (i, (gv, xv)) in g.iter().zip(val(*x)).enumerate() {
                        dg[(i / per_group) * c + i % c] += gv * xv;
                    }
                });
            }
            Op::Dot { x, weights } => accumulate(nodes, grads, *x, |dx| {
                dx.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w)
            }),
            Op::Sum { x } => accumulate(nodes, grads, *x, |dx| {
                dx.iter_mut().for_each(|d| *d += g[0])
            }),
            Op::L2Normalize { x, norms } => accumulate(nodes, grads, *x, |dx| {
                let c = out.last_dim();
                for (((dr, gr), yr), n) in dx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data().chunks_exact(c))
                    .zip(norms)
                {
                    let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += (gr[j] - yr[j] * proj) / n;
                    }
                }
            }),
            Op::ScalarWithGrad { x, dx: local } => accumulate(nodes, grads, *x, |dx| {
                dx.iter_mut().zip(local).for_each(|(d, l)| *d += g[0] * l)
            }),
        }
    }
}
