//! Reverse-mode autodiff over a flat tape.
//!
//! The graph is rebuilt for every batch: operations push nodes onto the tape
//! during the forward pass, `backward` walks it in reverse. Tensors on the
//! tape are immutable once produced.

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::{matmul_acc, matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    /// A[m x k] * B[k x n]
    MatMul { a: usize, b: usize },
    /// A[m x k] * B[n x k]^T
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        /// (mean, 1/std) per row, cached in forward.
        stats: Vec<(f64, f64)>,
    },
    MaskedSoftmax { scores: usize, allow: Vec<bool> },
    GatherRows { table: usize, indices: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    LogSoftmaxRows { x: usize },
    /// Elementwise ln(max(a, floor)).
    LogFloor { a: usize, floor: f64 },
    /// Scalar probe: sum(a .* weights).
    Dot { a: usize, weights: Tensor },
    /// Scalar loss: sum over rows r of row_weight[r] * sum_k targets[r,k] * (-logp[r,k]).
    WeightedNll {
        logp: usize,
        targets: Tensor,
        row_weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    pub nan_scan: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            nan_scan: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.nan_scan {
            value
                .assert_finite("tape node value")
                .expect("non-finite value produced on tape");
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to node `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a: a.0, b: b.0 })
    }

    /// A * B^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (n, k2) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, &self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMulNt { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "add shape mismatch"
        );
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Add { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Scale { a: a.0, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::Relu { a: a.0 })
    }

    /// Per-row normalization to zero mean / unit variance, then affine by
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(gain).len(), cols, "layer_norm gain shape");
        assert_eq!(self.value(bias).len(), cols, "layer_norm bias shape");
        let mut out = vec![0.0; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = self.nodes[x.0].value.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            for c in 0..cols {
                let xn = (row[c] - mean) * rstd;
                out[r * cols + c] =
                    self.nodes[gain.0].value.data[c] * xn + self.nodes[bias.0].value.data[c];
            }
        }
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
        )
    }

    /// Softmax over allowed entries per row; denied entries are exactly zero.
    /// Rows with no allowed entry short-circuit to all-zero before any
    /// exponentiation, so no gradient flows through them.
    pub fn masked_softmax(&mut self, scores: Var, mask: &AttentionMask) -> Result<Var> {
        let (rows, cols) = (self.value(scores).rows(), self.value(scores).cols());
        if rows != mask.n_query || cols != mask.total_keys() {
            return Err(Error::Contract(format!(
                "masked_softmax: scores {rows}x{cols} vs mask {}x{}",
                mask.n_query,
                mask.total_keys()
            )));
        }
        self.value(scores).assert_finite("masked_softmax scores")?;
        let allow = mask.flat_allow();
        let out = masked_softmax_values(&self.nodes[scores.0].value, &allow);
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                scores: scores.0,
                allow,
            },
        ))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let cols = self.value(table).cols();
        let rows = self.value(table).rows();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < rows, "gather index out of range");
            out.extend_from_slice(self.nodes[table.0].value.row(i));
        }
        self.push(
            Tensor::matrix(indices.len(), cols, out),
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(total * cols);
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows width mismatch");
            out.extend_from_slice(&self.nodes[p.0].value.data);
        }
        self.push(
            Tensor::matrix(total, cols, out),
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = self.nodes[x.0].value.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        self.push(Tensor::matrix(rows, cols, out), Op::LogSoftmaxRows { x: x.0 })
    }

    /// Elementwise ln(max(a, floor)). The floor keeps exact zeros (masked
    /// softmax rows, denied entries) from producing -inf; no gradient flows
    /// through floored entries.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|x| x.max(floor).ln())
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, data), Op::LogFloor { a: a.0, floor })
    }

    /// Scalar probe node: sum(a .* weights). Test harness utility.
    pub fn dot(&mut self, a: Var, weights: Tensor) -> Var {
        assert!(weights.same_shape(self.value(a)), "dot shape mismatch");
        let v: f64 = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&weights.data)
            .map(|(x, w)| x * w)
            .sum();
        self.push(Tensor::scalar(v), Op::Dot { a: a.0, weights })
    }

    /// Scalar loss node. `targets` rows need not be one-hot (soft labels are
    /// the point); `row_weights` zeroes out padding rows and applies the
    /// per-token normalization.
    pub fn weighted_nll(&mut self, logp: Var, targets: Tensor, row_weights: Vec<f64>) -> Var {
        let (rows, cols) = (self.value(logp).rows(), self.value(logp).cols());
        assert!(targets.same_shape(self.value(logp)), "nll target shape");
        assert_eq!(row_weights.len(), rows, "nll row_weights length");
        let mut total = 0.0;
        for r in 0..rows {
            if row_weights[r] == 0.0 {
                continue;
            }
            let lrow = self.nodes[logp.0].value.row(r);
            let trow = targets.row(r);
            let s: f64 = trow.iter().zip(lrow).map(|(t, l)| t * l).sum();
            total -= row_weights[r] * s;
        }
        let _ = cols;
        self.push(
            Tensor::scalar(total),
            Op::WeightedNll {
                logp: logp.0,
                targets,
                row_weights,
            },
        )
    }

    /// Reverse pass seeding d(loss)/d(loss) = 1. Gradients for every node are
    /// retrievable through `grad` afterwards.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[loss.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.cols();
                    // dA += dC * B^T ; dB += A^T * dC
                    let bval = &self.nodes[b].value.data;
                    matmul_nt_acc(&mut self.grads[a], &g, bval, m, n, k);
                    let aval = &self.nodes[a].value.data;
                    matmul_tn_acc(&mut self.grads[b], aval, &g, k, m, n);
                }
                Op::MatMulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.rows();
                    // C = A * B^T : dA += dC * B ; dB += dC^T * A
                    let bval = &self.nodes[b].value.data;
                    matmul_acc(&mut self.grads[a], &g, bval, m, n, k);
                    let aval = &self.nodes[a].value.data;
                    matmul_tn_acc(&mut self.grads[b], &g, aval, n, m, k);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (ga, &gi) in self.grads[a].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, &gi) in self.grads[b].iter_mut().zip(&g) {
                        *gb += gi;
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    for (ga, &gi) in self.grads[a].iter_mut().zip(&g) {
                        *ga += c * gi;
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    for j in 0..g.len() {
                        if self.nodes[a].value.data[j] > 0.0 {
                            self.grads[a][j] += g[j];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let stats = stats.clone();
                    let (rows, cols) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xrow = self.nodes[x].value.row(r).to_vec();
                        let grow = &g[r * cols..(r + 1) * cols];
                        // dyhat_c = g_c * gain_c ; xhat_c = (x_c - mean) * rstd
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        let mut dyhat = vec![0.0; cols];
                        let mut xhat = vec![0.0; cols];
                        for c in 0..cols {
                            xhat[c] = (xrow[c] - mean) * rstd;
                            dyhat[c] = grow[c] * self.nodes[gain].value.data[c];
                            sum_dy += dyhat[c];
                            sum_dy_xhat += dyhat[c] * xhat[c];
                        }
                        let inv = 1.0 / cols as f64;
                        for c in 0..cols {
                            self.grads[x][r * cols + c] += rstd
                                * (dyhat[c] - inv * sum_dy - xhat[c] * inv * sum_dy_xhat);
                            self.grads[gain][c] += grow[c] * xhat[c];
                            self.grads[bias][c] += grow[c];
                        }
                    }
                }
                Op::MaskedSoftmax { scores, allow } => {
                    let scores = *scores;
                    let allow = allow.clone();
                    let (rows, cols) = (
                        self.nodes[i].value.rows(),
                        self.nodes[i].value.cols(),
                    );
                    for r in 0..rows {
                        let prow = self.nodes[i].value.row(r).to_vec();
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = grow
                            .iter()
                            .zip(&prow)
                            .map(|(gi, pi)| gi * pi)
                            .sum();
                        for c in 0..cols {
                            if allow[r * cols + c] {
                                self.grads[scores][r * cols + c] += prow[c] * (grow[c] - dot);
                            }
                        }
                    }
                }
                Op::GatherRows { table, indices } => {
                    let table = *table;
                    let indices = indices.clone();
                    let cols = self.nodes[table].value.cols();
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            self.grads[table][idx * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = self.nodes[i].value.rows();
                    let total = self.nodes[i].value.cols();
                    for r in 0..rows {
                        let mut off = 0;
                        for &p in &parts {
                            let w = self.nodes[p].value.cols();
                            for c in 0..w {
                                self.grads[p][r * w + c] += g[r * total + off + c];
                            }
                            off += w;
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for &p in &parts {
                        let len = self.nodes[p].value.len();
                        for j in 0..len {
                            self.grads[p][j] += g[off + j];
                        }
                        off += len;
                    }
                }
                Op::LogSoftmaxRows { x } => {
                    let x = *x;
                    let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    for r in 0..rows {
                        let lrow = self.nodes[i].value.row(r).to_vec();
                        let grow = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            self.grads[x][r * cols + c] += grow[c] - lrow[c].exp() * gsum;
                        }
                    }
                }
                Op::LogFloor { a, floor } => {
                    let (a, floor) = (*a, *floor);
                    for j in 0..g.len() {
                        let x = self.nodes[a].value.data[j];
                        if x > floor {
                            self.grads[a][j] += g[j] / x;
                        }
                    }
                }
                Op::Dot { a, weights } => {
                    let a = *a;
                    let weights = weights.clone();
                    let gs = g[0];
                    for (ga, w) in self.grads[a].iter_mut().zip(&weights.data) {
                        *ga += gs * w;
                    }
                }
                Op::WeightedNll {
                    logp,
                    targets,
                    row_weights,
                } => {
                    let logp = *logp;
                    let targets = targets.clone();
                    let row_weights = row_weights.clone();
                    let gscalar = g[0];
                    let cols = targets.cols();
                    for r in 0..targets.rows() {
                        if row_weights[r] == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            self.grads[logp][r * cols + c] -=
                                gscalar * row_weights[r] * targets.at(r, c);
                        }
                    }
                }
            }
            self.grads[i] = g;
        }
    }
}

/// Forward-only masked softmax over a flattened allow matrix.
pub fn masked_softmax_values(scores: &Tensor, allow: &[bool]) -> Tensor {
    let (rows, cols) = (scores.rows(), scores.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let srow = scores.row(r);
        let arow = &allow[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if arow[c] && srow[c] > max {
                max = srow[c];
            }
        }
        if max == f64::NEG_INFINITY {
            continue; // fully denied: leave the row at exact zero
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if arow[c] {
                let e = (srow[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Value-level masked softmax against an `AttentionMask`.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let out = tape.masked_softmax(s, mask)?;
    Ok(tape.value(out).clone())
}

/// Value-level layer normalization.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.leaf(x.clone()), tape.leaf(gain.clone()), tape.leaf(bias.clone()));
    let out = tape.layer_norm(xv, gv, bv, eps);
    tape.value(out).clone()
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `usize::MAX` checks all.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: usize::MAX,
            seed: 0,
        }
    }
}

/// Compares analytic gradients against central differences of `f`.
/// Returns the max over sampled coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn gradient_check(
    mut f: impl FnMut(&[Tensor]) -> f64,
    point: &[Tensor],
    analytic: &[Vec<f64>],
    opts: GradCheckOptions,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let base = f(point);
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient_check objective".into()));
    }
    assert_eq!(point.len(), analytic.len(), "analytic gradient count");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = point.to_vec();
    for (pi, tensor) in point.iter().enumerate() {
        assert_eq!(analytic[pi].len(), tensor.len(), "analytic gradient shape");
        let n = tensor.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords).map(|_| rng.gen_range(0..n)).collect()
        };
        for ci in coords {
            let orig = perturbed[pi].data[ci];
            perturbed[pi].data[ci] = orig + opts.step;
            let fp = f(&perturbed);
            perturbed[pi].data[ci] = orig - opts.step;
            let fm = f(&perturbed);
            perturbed[pi].data[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("gradient_check perturbed objective".into()));
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
