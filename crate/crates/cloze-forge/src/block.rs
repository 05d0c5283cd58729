//! Transformer block parameters and the tape-level forward for multi-head
//! masked attention, shared by the cloze model and the seq2seq student.

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::mask::{AttentionMask, MaskBank};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform init scaled by fan-in, variance 1/fan_in.
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (3.0 / rows as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
}

/// Sinusoidal position encoding rows for positions 0..n.
/// Channel 2i holds sin(p / 10000^(2i/D)), channel 2i+1 the matching cos.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for p in 0..n {
        for i in 0..dim.div_ceil(2) {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = angle.sin();
            if 2 * i + 1 < dim {
                data[p * dim + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(n, dim, data)
}

/// Mask with every (query, key) pair allowed; used by the encoder and by
/// decoder cross-attention.
pub fn full_mask(n_query: usize, n_key: usize) -> AttentionMask {
    AttentionMask {
        n_query,
        banks: vec![MaskBank {
            n_key,
            allow: vec![true; n_query * n_key],
        }],
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    /// Per-head projections, each [D x d_k].
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// Output projection [D x D].
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl AttnParams {
    pub fn init(rng: &mut ChaCha8Rng, model_dim: usize, heads: usize) -> Self {
        let dk = model_dim / heads;
        AttnParams {
            wq: (0..heads).map(|_| init_matrix(rng, model_dim, dk)).collect(),
            wk: (0..heads).map(|_| init_matrix(rng, model_dim, dk)).collect(),
            wv: (0..heads).map(|_| init_matrix(rng, model_dim, dk)).collect(),
            wo: init_matrix(rng, model_dim, model_dim),
            ln_gain: Tensor::new(vec![model_dim], vec![1.0; model_dim]),
            ln_bias: Tensor::new(vec![model_dim], vec![0.0; model_dim]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (h, t) in self.wq.iter().enumerate() {
            out.push((format!("{prefix}.wq{h}"), t));
        }
        for (h, t) in self.wk.iter().enumerate() {
            out.push((format!("{prefix}.wk{h}"), t));
        }
        for (h, t) in self.wv.iter().enumerate() {
            out.push((format!("{prefix}.wv{h}"), t));
        }
        out.push((format!("{prefix}.wo"), &self.wo));
        out.push((format!("{prefix}.ln_gain"), &self.ln_gain));
        out.push((format!("{prefix}.ln_bias"), &self.ln_bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (h, t) in self.wq.iter_mut().enumerate() {
            out.push((format!("{prefix}.wq{h}"), t));
        }
        for (h, t) in self.wk.iter_mut().enumerate() {
            out.push((format!("{prefix}.wk{h}"), t));
        }
        for (h, t) in self.wv.iter_mut().enumerate() {
            out.push((format!("{prefix}.wv{h}"), t));
        }
        out.push((format!("{prefix}.wo"), &mut self.wo));
        out.push((format!("{prefix}.ln_gain"), &mut self.ln_gain));
        out.push((format!("{prefix}.ln_bias"), &mut self.ln_bias));
    }
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    /// [D x D_in]
    pub w1: Tensor,
    /// [D_in x D]
    pub w2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl FfnParams {
    pub fn init(rng: &mut ChaCha8Rng, model_dim: usize, inner_dim: usize) -> Self {
        FfnParams {
            w1: init_matrix(rng, model_dim, inner_dim),
            w2: init_matrix(rng, inner_dim, model_dim),
            ln_gain: Tensor::new(vec![model_dim], vec![1.0; model_dim]),
            ln_bias: Tensor::new(vec![model_dim], vec![0.0; model_dim]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.ln_gain"), &self.ln_gain));
        out.push((format!("{prefix}.ln_bias"), &self.ln_bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.ln_gain"), &mut self.ln_gain));
        out.push((format!("{prefix}.ln_bias"), &mut self.ln_bias));
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn init(rng: &mut ChaCha8Rng, model_dim: usize, heads: usize, inner_dim: usize) -> Self {
        BlockParams {
            attn: AttnParams::init(rng, model_dim, heads),
            ffn: FfnParams::init(rng, model_dim, inner_dim),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
        self.ffn.collect_mut(&format!("{prefix}.ffn"), out);
    }
}

/// Tape-side handles to one attention sublayer's parameters.
pub struct AttnVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

pub struct FfnVars {
    pub w1: Var,
    pub w2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

pub struct BlockVars {
    pub attn: AttnVars,
    pub ffn: FfnVars,
}

impl AttnParams {
    /// Push leaves in the same order as `collect`.
    pub fn on_tape(&self, tape: &mut Tape, flat: &mut Vec<Var>) -> AttnVars {
        let wq: Vec<Var> = self.wq.iter().map(|t| tape.leaf(t.clone())).collect();
        let wk: Vec<Var> = self.wk.iter().map(|t| tape.leaf(t.clone())).collect();
        let wv: Vec<Var> = self.wv.iter().map(|t| tape.leaf(t.clone())).collect();
        let wo = tape.leaf(self.wo.clone());
        let ln_gain = tape.leaf(self.ln_gain.clone());
        let ln_bias = tape.leaf(self.ln_bias.clone());
        flat.extend(wq.iter().chain(&wk).chain(&wv).copied());
        flat.extend([wo, ln_gain, ln_bias]);
        AttnVars {
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
        }
    }
}

impl FfnParams {
    pub fn on_tape(&self, tape: &mut Tape, flat: &mut Vec<Var>) -> FfnVars {
        let w1 = tape.leaf(self.w1.clone());
        let w2 = tape.leaf(self.w2.clone());
        let ln_gain = tape.leaf(self.ln_gain.clone());
        let ln_bias = tape.leaf(self.ln_bias.clone());
        flat.extend([w1, w2, ln_gain, ln_bias]);
        FfnVars {
            w1,
            w2,
            ln_gain,
            ln_bias,
        }
    }
}

impl BlockParams {
    pub fn on_tape(&self, tape: &mut Tape, flat: &mut Vec<Var>) -> BlockVars {
        BlockVars {
            attn: self.attn.on_tape(tape, flat),
            ffn: self.ffn.on_tape(tape, flat),
        }
    }
}

/// Multi-head masked attention. Keys/values are drawn per bank and the
/// softmax normalizes jointly across all allowed entries of all banks.
/// Scores are scaled by 1/sqrt(d_k).
pub fn multi_head_attention(
    tape: &mut Tape,
    query_input: Var,
    kv_inputs: &[Var],
    mask: &AttentionMask,
    p: &AttnVars,
) -> crate::error::Result<Var> {
    assert_eq!(kv_inputs.len(), mask.banks.len(), "kv bank count vs mask");
    let dk = tape.value(p.wq[0]).cols();
    let scale = 1.0 / (dk as f64).sqrt();
    let kv_all = if kv_inputs.len() == 1 {
        kv_inputs[0]
    } else {
        tape.concat_rows(kv_inputs)
    };
    let mut head_outputs = Vec::with_capacity(p.wq.len());
    for h in 0..p.wq.len() {
        let q = tape.matmul(query_input, p.wq[h]);
        let k = tape.matmul(kv_all, p.wk[h]);
        let v = tape.matmul(kv_all, p.wv[h]);
        let raw = tape.matmul_nt(q, k);
        let scores = tape.scale(raw, scale);
        let probs = tape.masked_softmax(scores, mask)?;
        head_outputs.push(tape.matmul(probs, v));
    }
    let concat = tape.concat_cols(&head_outputs);
    Ok(tape.matmul(concat, p.wo))
}

/// Attention sublayer: residual + layer norm around multi-head attention.
pub fn attention_sublayer(
    tape: &mut Tape,
    x: Var,
    kv_inputs: &[Var],
    mask: &AttentionMask,
    p: &AttnVars,
) -> crate::error::Result<Var> {
    let attn = multi_head_attention(tape, x, kv_inputs, mask, p)?;
    let res = tape.add(x, attn);
    Ok(tape.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS))
}

/// Feed-forward sublayer: residual + layer norm around max(x W1, 0) W2.
pub fn ffn_sublayer(tape: &mut Tape, x: Var, p: &FfnVars) -> Var {
    let h = tape.matmul(x, p.w1);
    let a = tape.relu(h);
    let o = tape.matmul(a, p.w2);
    let res = tape.add(x, o);
    tape.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS)
}

/// Full transformer block: masked self/banked attention then position-wise FFN.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    kv_inputs: &[Var],
    mask: &AttentionMask,
    p: &BlockVars,
) -> crate::error::Result<Var> {
    let y = attention_sublayer(tape, x, kv_inputs, mask, &p.attn)?;
    Ok(ffn_sublayer(tape, y, &p.ffn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheckOptions};
    use crate::mask::build_forward_mask;
    use rand::SeedableRng;

    #[test]
    fn positions_zero_row() {
        let pe = sinusoidal_positions(2, 4);
        assert_eq!(pe.row(0), [0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positions_closed_form() {
        // position 1, D=2: [sin(1), cos(1)]
        let pe = sinusoidal_positions(2, 2);
        assert!((pe.at(1, 0) - 1.0f64.sin()).abs() < 1e-12);
        assert!((pe.at(1, 1) - 1.0f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn single_position_block_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockParams::init(&mut rng, 4, 2, 8);
        let mask = build_forward_mask(1).unwrap();
        let mut tape = Tape::new();
        let mut flat = Vec::new();
        let vars = p.on_tape(&mut tape, &mut flat);
        let x = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.1, 0.8, 0.2]));
        let out = transformer_block(&mut tape, x, &[x], &mask, &vars).unwrap();
        assert_eq!(tape.value(out).shape, vec![1, 4]);
        tape.value(out).assert_finite("block output").unwrap();
    }

    #[test]
    fn fully_denied_row_outputs_normed_residual() {
        use crate::mask::build_backward_mask;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 4;
        let p = BlockParams::init(&mut rng, dim, 2, 8);
        let mask = build_backward_mask(3).unwrap(); // rows 2 and 3 fully denied
        let mut tape = Tape::new();
        let mut flat = Vec::new();
        let vars = p.on_tape(&mut tape, &mut flat);
        let xdata: Vec<f64> = (0..3 * dim).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.leaf(Tensor::matrix(3, dim, xdata.clone()));
        let y = attention_sublayer(&mut tape, x, &[x], &mask, &vars.attn).unwrap();
        // denied row: attention contributes zero, so y = layer_norm(x)
        let expected = crate::autodiff::layer_norm(
            &Tensor::matrix(3, dim, xdata),
            &p.attn.ln_gain,
            &p.attn.ln_bias,
            LAYER_NORM_EPS,
        );
        for r in 1..3 {
            for c in 0..dim {
                assert!(
                    (tape.value(y).at(r, c) - expected.at(r, c)).abs() < 1e-15,
                    "row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn block_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (dim, heads, inner, n) = (4, 2, 6, 2);
        let p = BlockParams::init(&mut rng, dim, heads, inner);
        let mask = build_forward_mask(n).unwrap();
        let mut names = Vec::new();
        p.collect("block", &mut names);
        let point: Vec<Tensor> = names.iter().map(|(_, t)| (*t).clone()).collect();
        let x0 = Tensor::matrix(n, dim, (0..n * dim).map(|i| ((i * 7) as f64 * 0.13).sin()).collect());
        use rand::Rng as _;
        let probe = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let rebuild = |vals: &[Tensor]| -> BlockParams {
            let mut q = p.clone();
            let mut refs = Vec::new();
            q.collect_mut("block", &mut refs);
            for ((_, dst), src) in refs.into_iter().zip(vals) {
                *dst = src.clone();
            }
            q
        };
        let eval = |vals: &[Tensor]| -> f64 {
            let q = rebuild(vals);
            let mut tape = Tape::new();
            let mut flat = Vec::new();
            let vars = q.on_tape(&mut tape, &mut flat);
            let x = tape.leaf(x0.clone());
            let out = transformer_block(&mut tape, x, &[x], &mask, &vars).unwrap();
            let loss = tape.dot(out, probe.clone());
            tape.value(loss).data[0]
        };
        let mut tape = Tape::new();
        let mut flat = Vec::new();
        let vars = p.on_tape(&mut tape, &mut flat);
        let x = tape.leaf(x0.clone());
        let out = transformer_block(&mut tape, x, &[x], &mask, &vars).unwrap();
        let loss = tape.dot(out, probe.clone());
        tape.backward(loss);
        let analytic: Vec<Vec<f64>> = flat.iter().map(|v| tape.grad(*v).to_vec()).collect();
        let err = gradient_check(eval, &point, &analytic, GradCheckOptions::default()).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
