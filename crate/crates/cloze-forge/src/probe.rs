//! Numeric leak probing: how sensitive is the logit row at output t to the
//! embedding of the token at input position j? The defining invariant of the
//! model is that the target x_{t+1} shows exactly zero sensitivity.

use crate::autodiff::Tape;
use crate::cor::{cor_forward_on_tape, CorConfig, CorModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Max-abs Jacobian entries |d logits(t,.) / d emb(j,.)| for every
/// (output position, input position) pair, 0-based on both axes.
#[derive(Debug, Clone)]
pub struct SensitivityTable {
    pub n_out: usize,
    pub n_in: usize,
    /// Row-major [n_out x n_in], from the analytic backward pass.
    pub analytic: Vec<f64>,
    /// Same quantity estimated from central differences on random directions.
    pub fd: Vec<f64>,
    /// Worst absolute disagreement between the analytic and finite-difference
    /// directional derivatives.
    pub max_gap: f64,
}

impl SensitivityTable {
    pub fn analytic_at(&self, t: usize, j: usize) -> f64 {
        self.analytic[t * self.n_in + j]
    }

    pub fn fd_at(&self, t: usize, j: usize) -> f64 {
        self.fd[t * self.n_in + j]
    }
}

/// Full sensitivity table for one model and input, with finite-difference
/// cross-checking on `n_dirs` random unit directions per input position.
pub fn sensitivity_table(
    model: &CorModel,
    tokens: &[usize],
    n_dirs: usize,
    seed: u64,
) -> Result<SensitivityTable> {
    let n = tokens.len();
    let dim = model.config.model_dim;
    let k = model.config.vocab_size;
    let mut analytic = vec![0.0; n * n];

    // One backward pass per logit component; emb-row gradients bound the
    // Jacobian blocks exactly.
    let mut jac = vec![0.0; n * k * n * dim]; // [(t,kk) x (j,c)]
    for t in 0..n {
        for kk in 0..k {
            let mut tape = Tape::new();
            let vars = cor_forward_on_tape(&mut tape, tokens, model, None)?;
            tape.value(vars.logits).assert_finite("probe logits")?;
            let mut probe = Tensor::zeros(vec![n, k]);
            probe.data[t * k + kk] = 1.0;
            let scalar = tape.dot(vars.logits, probe);
            tape.backward(scalar);
            let g = tape.grad(vars.embedded);
            for j in 0..n {
                for c in 0..dim {
                    let v = g[j * dim + c];
                    jac[(t * k + kk) * n * dim + j * dim + c] = v;
                    let cell = &mut analytic[t * n + j];
                    if v.abs() > *cell {
                        *cell = v.abs();
                    }
                }
            }
        }
    }

    // Finite differences on random directions; compare against the analytic
    // directional derivative from the stored Jacobian.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut fd = vec![0.0; n * n];
    let mut max_gap: f64 = 0.0;
    for j in 0..n {
        for _ in 0..n_dirs {
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in dir.iter_mut() {
                *v /= norm;
            }
            let mut delta = Tensor::zeros(vec![n, dim]);
            for (c, &d) in dir.iter().enumerate() {
                delta.data[j * dim + c] = h * d;
            }
            let plus = forward_perturbed(model, tokens, &delta)?;
            for v in delta.data.iter_mut() {
                *v = -*v;
            }
            let minus = forward_perturbed(model, tokens, &delta)?;
            for t in 0..n {
                for kk in 0..k {
                    let fd_dd = (plus.at(t, kk) - minus.at(t, kk)) / (2.0 * h);
                    if !fd_dd.is_finite() {
                        return Err(Error::NonFinite("probe finite difference".into()));
                    }
                    let an_dd: f64 = (0..dim)
                        .map(|c| jac[(t * k + kk) * n * dim + j * dim + c] * dir[c])
                        .sum();
                    let gap = (fd_dd - an_dd).abs();
                    if gap > max_gap {
                        max_gap = gap;
                    }
                    let cell = &mut fd[t * n + j];
                    if fd_dd.abs() > *cell {
                        *cell = fd_dd.abs();
                    }
                }
            }
        }
    }
    Ok(SensitivityTable {
        n_out: n,
        n_in: n,
        analytic,
        fd,
        max_gap,
    })
}

fn forward_perturbed(model: &CorModel, tokens: &[usize], delta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = cor_forward_on_tape(&mut tape, tokens, model, Some(delta))?;
    Ok(tape.value(vars.logits).clone())
}

/// Max absolute sensitivity of logits(t, .) to the embedding at input
/// position j, over `seeds` random model initializations. `t` and `j` are
/// 1-based per the masking convention. The analytic and finite-difference
/// estimates must agree within 1e-6.
pub fn leak_probe(
    config: &CorConfig,
    seq_len: usize,
    t: usize,
    j: usize,
    seeds: u64,
) -> Result<f64> {
    if t < 1 || t > seq_len || j < 1 || j > seq_len {
        return Err(Error::Contract("probe position out of range".into()));
    }
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = CorModel::init(config, seed)?;
        let tokens: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            (0..seq_len)
                .map(|_| rng.gen_range(3..config.vocab_size))
                .collect()
        };
        let table = sensitivity_table(&model, &tokens, 2, seed)?;
        if table.max_gap > 1e-6 {
            return Err(Error::NonFinite(format!(
                "analytic/finite-difference disagreement {}",
                table.max_gap
            )));
        }
        let s = table
            .analytic_at(t - 1, j - 1)
            .max(table.fd_at(t - 1, j - 1));
        if s > worst {
            worst = s;
        }
    }
    Ok(worst)
}
